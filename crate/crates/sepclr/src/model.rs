//! Shared convolutional encoder and the two task heads.
//!
//! The encoder follows the modified-CNN14 recipe at a fraction of the size:
//! plain conv/ReLU/max-pool blocks without normalization or dropout, a final
//! embedding convolution with d filters, and global max pooling to produce
//! the d-dimensional representation h. Downstream consumers always use h;
//! the similarity head's metric embedding z exists only inside the NT-Xent
//! loss.

use rand::Rng;
use thiserror::Error;

use crate::features::{LogMelPatch, N_FRAMES, N_MELS};
use crate::nn::{Graph, NnError, NodeId, ParamSet, Tensor};
use crate::rng::rng_for;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("graph op failed: {0}")]
    Nn(#[from] NnError),
    #[error("expected patch batch of at least 1")]
    EmptyBatch,
}

/// Encoder architecture. `channels` lists the output channels of the conv
/// blocks (3x3, same padding, ReLU, 2x2 max pool each); a final 3x3
/// embedding conv with `embed_dim` filters and `embed_stride` feeds global
/// max pooling.
///
/// `input_pool` mean-decimates the 96x64 patch before the first block. The
/// desk default trades spectral resolution for the single-core step budget;
/// `input_pool: 1` restores full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_pool: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub embed_stride: usize,
    /// Fixed affine normalization of the log-mel input:
    /// x' = (x - input_offset) * input_scale.
    pub input_offset: f64,
    pub input_scale: f64,
}

impl EncoderConfig {
    /// Default desk-scale encoder: 2x2 input decimation, three conv blocks
    /// (8/16/32), strided 128-filter embedding conv. About 43k weights.
    pub fn desk_default() -> Self {
        Self {
            input_pool: 2,
            channels: vec![8, 16, 32],
            embed_dim: 128,
            embed_stride: 2,
            input_offset: -6.0,
            input_scale: 0.25,
        }
    }

    /// Reduced encoder for gradient checking.
    pub fn reduced(embed_dim: usize) -> Self {
        Self { input_pool: 4, channels: vec![4], embed_dim, embed_stride: 2, ..Self::desk_default() }
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        let mut cin = 1;
        for &c in &self.channels {
            count += c * cin * 9 + c;
            cin = c;
        }
        count + self.embed_dim * cin * 9 + self.embed_dim
    }
}

pub const SIM_HIDDEN: usize = 256;
pub const SIM_OUT: usize = 128;
pub const COIN_HIDDEN: usize = 512;

/// Encoder parameters theta, similarity head phi, coincidence head gamma,
/// plus Adam moments, all under one optimizer step counter.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub encoder: EncoderConfig,
    pub params: ParamSet,
}

impl ModelState {
    /// Fan-in uniform init, zero biases, quantized to f32 resolution so the
    /// 32-bit checkpoint format is exact from step zero.
    pub fn init(encoder: EncoderConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "init", 0);
        let mut params = ParamSet::default();
        let mut push_dense = |params: &mut ParamSet, name: &str, out: usize, fan_in: usize, shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(rng.random_range(-bound..bound));
            }
            let mut w = Tensor::from_vec(shape, data).expect("init shape");
            w.round_to_f32();
            params.push(format!("{name}.w"), w);
            params.push(format!("{name}.b"), Tensor::zeros(&[out]));
        };

        let mut cin = 1usize;
        for (i, &c) in encoder.channels.iter().enumerate() {
            push_dense(&mut params, &format!("encoder.conv{}", i + 1), c, cin * 9, &[c, cin, 3, 3], &mut rng);
            cin = c;
        }
        push_dense(&mut params, "encoder.embed", encoder.embed_dim, cin * 9, &[encoder.embed_dim, cin, 3, 3], &mut rng);

        let d = encoder.embed_dim;
        push_dense(&mut params, "sim_head.fc1", SIM_HIDDEN, d, &[SIM_HIDDEN, d], &mut rng);
        push_dense(&mut params, "sim_head.fc2", SIM_OUT, SIM_HIDDEN, &[SIM_OUT, SIM_HIDDEN], &mut rng);

        push_dense(&mut params, "coin_head.fc1", COIN_HIDDEN, 2 * d, &[COIN_HIDDEN, 2 * d], &mut rng);
        push_dense(&mut params, "coin_head.fc2", COIN_HIDDEN, COIN_HIDDEN, &[COIN_HIDDEN, COIN_HIDDEN], &mut rng);
        push_dense(&mut params, "coin_head.fc3", 1, COIN_HIDDEN, &[1, COIN_HIDDEN], &mut rng);

        Self { encoder, params }
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.params.total_len()
    }
}

/// Leaf node per parameter, in ParamSet order. `tracked` selects which
/// parameter groups receive gradients ("encoder.", "sim_head.", ...).
pub fn insert_param_leaves(g: &mut Graph, state: &ModelState, tracked_prefixes: &[&str]) -> Vec<NodeId> {
    state
        .params
        .params
        .iter()
        .map(|p| {
            let tracked = tracked_prefixes.iter().any(|pre| p.name.starts_with(pre));
            g.leaf(p.value.clone(), tracked)
        })
        .collect()
}

fn leaf(leaves: &[NodeId], state: &ModelState, name: &str) -> NodeId {
    leaves[state.params.index_of(name).unwrap_or_else(|| panic!("missing param {name}"))]
}

/// Stacks patches into a [B, 1, 96, 64] input tensor.
pub fn patches_to_tensor(patches: &[&LogMelPatch]) -> Result<Tensor, ModelError> {
    if patches.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut data = Vec::with_capacity(patches.len() * N_FRAMES * N_MELS);
    for p in patches {
        data.extend_from_slice(p.values());
    }
    Ok(Tensor::from_vec(&[patches.len(), 1, N_FRAMES, N_MELS], data)?)
}

/// Encoder forward: [B, 1, 96, 64] -> [B, d].
pub fn encoder_forward(
    g: &mut Graph,
    state: &ModelState,
    leaves: &[NodeId],
    input: NodeId,
) -> Result<NodeId, ModelError> {
    let cfg = &state.encoder;
    // pool before the affine normalization; both are linear so the order
    // only changes rounding, and the pooled grid is a quarter the size
    let mut x = input;
    if cfg.input_pool > 1 {
        x = g.avg_pool2d(x, cfg.input_pool)?;
    }
    x = g.affine_scalar(x, cfg.input_scale, -cfg.input_offset * cfg.input_scale);
    for i in 0..cfg.channels.len() {
        let w = leaf(leaves, state, &format!("encoder.conv{}.w", i + 1));
        let b = leaf(leaves, state, &format!("encoder.conv{}.b", i + 1));
        x = g.conv2d(x, w, 1, 1)?;
        x = g.bias_channel(x, b)?;
        x = g.relu(x);
        x = g.max_pool2d(x, 2)?;
    }
    let w = leaf(leaves, state, "encoder.embed.w");
    let b = leaf(leaves, state, "encoder.embed.b");
    x = g.conv2d(x, w, 1, cfg.embed_stride)?;
    x = g.bias_channel(x, b)?;
    Ok(g.global_max_pool(x)?)
}

/// Similarity head g_phi: [B, d] -> [B, 128] metric embeddings z.
pub fn sim_head_forward(
    g: &mut Graph,
    state: &ModelState,
    leaves: &[NodeId],
    h: NodeId,
) -> Result<NodeId, ModelError> {
    let w1 = leaf(leaves, state, "sim_head.fc1.w");
    let b1 = leaf(leaves, state, "sim_head.fc1.b");
    let w2 = leaf(leaves, state, "sim_head.fc2.w");
    let b2 = leaf(leaves, state, "sim_head.fc2.b");
    let mut x = g.matmul(h, w1, true)?;
    x = g.bias_row(x, b1)?;
    x = g.relu(x);
    x = g.matmul(x, w2, true)?;
    Ok(g.bias_row(x, b2)?)
}

/// Coincidence head g_gamma over all (row of h_a) x (row of h_b) pairs:
/// returns probabilities [Na*Nb] in row-major pair order.
///
/// The first dense layer of the concatenated pair [h_a, h_b] is computed as
/// two per-side projections summed per pair, which is the same affine map
/// without materializing Na*Nb concatenations.
pub fn coin_head_pair_grid(
    g: &mut Graph,
    state: &ModelState,
    leaves: &[NodeId],
    h_a: NodeId,
    h_b: NodeId,
) -> Result<NodeId, ModelError> {
    let d = state.encoder.embed_dim;
    let w1 = leaf(leaves, state, "coin_head.fc1.w");
    let b1 = leaf(leaves, state, "coin_head.fc1.b");
    let w2 = leaf(leaves, state, "coin_head.fc2.w");
    let b2 = leaf(leaves, state, "coin_head.fc2.b");
    let w3 = leaf(leaves, state, "coin_head.fc3.w");
    let b3 = leaf(leaves, state, "coin_head.fc3.b");

    let w1a = g.slice_cols(w1, 0, d)?;
    let w1b = g.slice_cols(w1, d, d)?;
    let u = g.matmul(h_a, w1a, true)?;
    let v = g.matmul(h_b, w1b, true)?;
    let mut x = g.pair_row_sum(u, v)?;
    x = g.bias_row(x, b1)?;
    x = g.relu(x);
    x = g.matmul(x, w2, true)?;
    x = g.bias_row(x, b2)?;
    x = g.relu(x);
    x = g.matmul(x, w3, true)?;
    x = g.bias_row(x, b3)?;
    let n_pairs = g.value(x).shape()[0];
    let x = g.reshape(x, &[n_pairs])?;
    let probs = g.sigmoid(x);
    Ok(probs)
}

/// Embeds one patch with the current parameters.
pub fn encode(patch: &LogMelPatch, state: &ModelState) -> Result<Vec<f64>, ModelError> {
    Ok(encode_batch(&[patch], state)?.remove(0))
}

/// Embeds a batch of patches; one graph, no gradient tracking.
pub fn encode_batch(patches: &[&LogMelPatch], state: &ModelState) -> Result<Vec<Vec<f64>>, ModelError> {
    let input = patches_to_tensor(patches)?;
    let mut g = Graph::new();
    let leaves = insert_param_leaves(&mut g, state, &[]);
    let x = g.leaf(input, false);
    let h = encoder_forward(&mut g, state, &leaves, x)?;
    let d = state.encoder.embed_dim;
    let data = g.value(h).data();
    Ok((0..patches.len()).map(|r| data[r * d..(r + 1) * d].to_vec()).collect())
}

/// Coincidence probability for a single pair of embeddings.
pub fn coincidence_probability(
    h_a: &[f64],
    h_b: &[f64],
    state: &ModelState,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let leaves = insert_param_leaves(&mut g, state, &[]);
    let a = g.leaf(Tensor::from_vec(&[1, h_a.len()], h_a.to_vec())?, false);
    let b = g.leaf(Tensor::from_vec(&[1, h_b.len()], h_b.to_vec())?, false);
    let probs = coin_head_pair_grid(&mut g, state, &leaves, a, b)?;
    Ok(g.value(probs).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::log_mel;
    use crate::features::SNIPPET_SAMPLES;
    use crate::nn::gradcheck;

    fn test_patch(seed: u64) -> LogMelPatch {
        let mut rng = rng_for(seed, "patch", 0);
        let snippet: Vec<f32> = (0..SNIPPET_SAMPLES).map(|_| rng.random_range(-0.3..0.3)).collect();
        log_mel(&snippet).unwrap()
    }

    #[test]
    fn default_encoder_outputs_128_dims() {
        let state = ModelState::init(EncoderConfig::desk_default(), 1);
        let h = encode(&test_patch(0), &state).unwrap();
        assert_eq!(h.len(), 128);
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoding_is_deterministic() {
        let state = ModelState::init(EncoderConfig::desk_default(), 1);
        let p = test_patch(1);
        assert_eq!(encode(&p, &state).unwrap(), encode(&p, &state).unwrap());
    }

    #[test]
    fn encoder_stays_under_a_million_params() {
        let cfg = EncoderConfig::desk_default();
        let state = ModelState::init(cfg.clone(), 1);
        assert!(cfg.param_count() <= 1_000_000, "{}", cfg.param_count());
        assert_eq!(state.encoder_param_count(), cfg.param_count());
        // config-declared count matches actual allocated encoder tensors
        let actual: usize = state
            .params
            .params
            .iter()
            .filter(|p| p.name.starts_with("encoder."))
            .map(|p| p.value.numel())
            .sum();
        assert_eq!(actual, cfg.param_count());
    }

    #[test]
    fn sim_head_maps_to_128_and_zero_params_give_zero() {
        let mut state = ModelState::init(EncoderConfig::desk_default(), 1);
        let h = encode(&test_patch(2), &state).unwrap();

        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &[]);
        let hn = g.leaf(Tensor::from_vec(&[1, 128], h.clone()).unwrap(), false);
        let z = sim_head_forward(&mut g, &state, &leaves, hn).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 128]);

        for p in &mut state.params.params {
            if p.name.starts_with("sim_head") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &[]);
        let hn = g.leaf(Tensor::from_vec(&[1, 128], h).unwrap(), false);
        let z = sim_head_forward(&mut g, &state, &leaves, hn).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coin_head_zero_output_layer_gives_half() {
        let mut state = ModelState::init(EncoderConfig::desk_default(), 1);
        for p in &mut state.params.params {
            if p.name.starts_with("coin_head.fc3") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let h_a = encode(&test_patch(3), &state).unwrap();
        let h_b = encode(&test_patch(4), &state).unwrap();
        let p = coincidence_probability(&h_a, &h_b, &state).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn coin_head_output_is_a_probability() {
        let state = ModelState::init(EncoderConfig::desk_default(), 5);
        for seed in 0..10 {
            let h_a = encode(&test_patch(seed), &state).unwrap();
            let h_b = encode(&test_patch(seed + 100), &state).unwrap();
            let p = coincidence_probability(&h_a, &h_b, &state).unwrap();
            assert!(p > 0.0 && p < 1.0, "p = {p}");
        }
    }

    #[test]
    fn encoder_probe_loss_passes_gradient_check() {
        // loss = ||h||^2 / 2 with respect to encoder parameters
        let state = ModelState::init(EncoderConfig::reduced(16), 7);
        let patch = test_patch(6);
        let input = patches_to_tensor(&[&patch]).unwrap();

        let mut eval = |s: &ParamSet| -> f64 {
            let eval_state = ModelState { encoder: state.encoder.clone(), params: s.clone() };
            let mut g = Graph::new();
            let leaves = insert_param_leaves(&mut g, &eval_state, &[]);
            let x = g.leaf(input.clone(), false);
            let h = encoder_forward(&mut g, &eval_state, &leaves, x).unwrap();
            let sq = g.mul(h, h).unwrap();
            let s = g.sum_all(sq);
            let l = g.scalar_mul(s, 0.5);
            g.value(l).item().unwrap()
        };

        // analytic gradients
        let mut g = Graph::new();
        let leaves = insert_param_leaves(&mut g, &state, &["encoder."]);
        let x = g.leaf(input.clone(), false);
        let h = encoder_forward(&mut g, &state, &leaves, x).unwrap();
        let sq = g.mul(h, h).unwrap();
        let s = g.sum_all(sq);
        let l = g.scalar_mul(s, 0.5);
        let grads = g.backward(l).unwrap();

        let mut checked = 0;
        for (pi, p) in state.params.params.iter().enumerate() {
            if !p.name.starts_with("encoder.") {
                continue;
            }
            let ga = grads[leaves[pi]].as_ref().expect("gradient");
            let stride = (p.value.numel() / 8).max(1);
            for ci in (0..p.value.numel()).step_by(stride) {
                let num = gradcheck::central_diff(&mut eval, &state.params, pi, ci, 1e-5);
                let err = gradcheck::rel_err(ga.data()[ci], num);
                assert!(err <= 1e-4, "{} coord {ci}: {err}", p.name);
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} coordinates checked");
    }

    #[test]
    fn dominated_cells_do_not_affect_the_embedding() {
        // full-resolution variant: cells that lose every max-pool window
        // they feed leave the embedding bit-identical when nudged
        let cfg = EncoderConfig {
            input_pool: 1,
            channels: vec![4],
            embed_dim: 16,
            embed_stride: 2,
            ..EncoderConfig::desk_default()
        };
        let state = ModelState::init(cfg, 11);
        let patch = test_patch(8);
        let base = encode(&patch, &state).unwrap();
        let mut unchanged = 0;
        let mut changed = 0;
        for t in (0..N_FRAMES).step_by(7) {
            for f in (0..N_MELS).step_by(5) {
                let mut values = patch.values().to_vec();
                values[t * N_MELS + f] += 1e-6;
                let perturbed = LogMelPatch::from_values(values);
                if encode(&perturbed, &state).unwrap() == base {
                    unchanged += 1;
                } else {
                    changed += 1;
                }
            }
        }
        assert!(unchanged > 0, "no dominated cells found");
        assert!(changed > 0, "perturbations never propagate; encoder is degenerate");
    }
}
