//! Central finite-difference gradient checking.

use super::adam::ParamSet;

/// Central difference df/dp at one parameter coordinate, h on each side.
pub fn central_diff(
    f: &mut dyn FnMut(&ParamSet) -> f64,
    params: &ParamSet,
    param_idx: usize,
    coord: usize,
    h: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.params[param_idx].value.data_mut()[coord] += h;
    let mut minus = params.clone();
    minus.params[param_idx].value.data_mut()[coord] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error between an analytic and a numeric derivative, with an
/// absolute guard for near-zero pairs.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn central_diff_matches_polynomial() {
        // f(p) = p0^3: derivative at p0=2 is 12.
        let mut set = ParamSet::default();
        set.push("p", Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let mut f = |s: &ParamSet| s.params[0].value.data()[0].powi(3);
        let d = central_diff(&mut f, &set, 0, 0, 1e-5);
        assert!(rel_err(12.0, d) < 1e-8, "d = {d}");
    }
}
