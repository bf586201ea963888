//! Waveform snippets to log-mel patches, plus the augmentation stages that
//! produce training views: temporal-proximity snippet sampling followed by
//! SpecAugment (time warp, then frequency and time masks).

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

use crate::rng::derive_seed;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SAMPLE_RATE: usize = 16_000;
/// 0.96 s at 16 kHz.
pub const SNIPPET_SAMPLES: usize = 15_360;
/// 25 ms Hann window.
pub const WIN_SAMPLES: usize = 400;
/// 10 ms hop.
pub const HOP_SAMPLES: usize = 160;
pub const N_FFT: usize = 512;
pub const N_FRAMES: usize = 96;
pub const N_MELS: usize = 64;
/// Reflect padding appended to the snippet tail so that exactly 96 frames fit.
const TAIL_PAD: usize = 240;
const MEL_FMIN_HZ: f64 = 125.0;
const MEL_FMAX_HZ: f64 = 7_500.0;
/// Energies are floored at 1e-5 before the log.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip of {got} samples is shorter than the {want}-sample snippet")]
    ClipTooShort { got: usize, want: usize },
    #[error("snippet must be exactly {want} samples, got {got}")]
    WrongSnippetLength { got: usize, want: usize },
    #[error("augmentation policy invalid: {why}")]
    BadPolicy { why: String },
}

/// A 96x64 log-mel patch; rows index time frames and columns mel bands.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelPatch {
    values: Vec<f64>,
}

impl LogMelPatch {
    pub fn from_values(values: Vec<f64>) -> Self {
        assert_eq!(values.len(), N_FRAMES * N_MELS);
        Self { values }
    }

    pub fn at(&self, frame: usize, band: usize) -> f64 {
        self.values[frame * N_MELS + band]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frames(&self) -> usize {
        N_FRAMES
    }

    pub fn bands(&self) -> usize {
        N_MELS
    }

    /// Mean log-energy per band over all frames.
    pub fn band_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; N_MELS];
        for t in 0..N_FRAMES {
            for f in 0..N_MELS {
                out[f] += self.values[t * N_MELS + f];
            }
        }
        for v in &mut out {
            *v /= N_FRAMES as f64;
        }
        out
    }
}

/// SpecAugment settings for one DA stage. Widths are maxima; actual widths
/// are drawn uniformly in [0, max] per mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
    pub max_mask_width: usize,
    pub max_time_warp: usize,
    pub warp_enabled: bool,
    pub masks_enabled: bool,
}

impl AugmentationPolicy {
    /// Two frequency masks, two time masks, max width 10, max warp 8.
    pub fn specaugment() -> Self {
        Self {
            n_freq_masks: 2,
            n_time_masks: 2,
            max_mask_width: 10,
            max_time_warp: 8,
            warp_enabled: true,
            masks_enabled: true,
        }
    }

    /// Everything off; spec_augment becomes the identity.
    pub fn disabled() -> Self {
        Self { warp_enabled: false, masks_enabled: false, ..Self::specaugment() }
    }

    fn validate(&self) -> Result<(), FeatureError> {
        if self.max_mask_width > N_MELS || self.max_mask_width > N_FRAMES {
            return Err(FeatureError::BadPolicy {
                why: format!("mask width {} exceeds patch dims", self.max_mask_width),
            });
        }
        if self.warp_enabled && 2 * self.max_time_warp + 1 >= N_FRAMES {
            return Err(FeatureError::BadPolicy {
                why: format!("time warp {} too large for {} frames", self.max_time_warp, N_FRAMES),
            });
        }
        Ok(())
    }
}

/// A selected 0.96 s snippet within a longer clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnippetSelection {
    pub start_sample: usize,
    pub length_samples: usize,
}

/// Draws a snippet start uniformly over the valid range.
pub fn tp_sample(clip_samples: usize, seed: u64) -> Result<SnippetSelection, FeatureError> {
    if clip_samples < SNIPPET_SAMPLES {
        return Err(FeatureError::ClipTooShort { got: clip_samples, want: SNIPPET_SAMPLES });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=clip_samples - SNIPPET_SAMPLES);
    Ok(SnippetSelection { start_sample: start, length_samples: SNIPPET_SAMPLES })
}

struct MelBand {
    first_bin: usize,
    weights: Vec<f64>,
}

struct FilterBank {
    bands: Vec<MelBand>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn build_filterbank() -> FilterBank {
    let n_bins = N_FFT / 2 + 1;
    let mel_lo = hz_to_mel(MEL_FMIN_HZ);
    let mel_hi = hz_to_mel(MEL_FMAX_HZ);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    let mut bands = Vec::with_capacity(N_MELS);
    for m in 0..N_MELS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut first_bin = None;
        let mut weights = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            let w = up.min(down).max(0.0);
            if w > 0.0 {
                if first_bin.is_none() {
                    first_bin = Some(k);
                }
                weights.push(w);
            } else if first_bin.is_some() {
                break;
            }
        }
        bands.push(MelBand { first_bin: first_bin.unwrap_or(0), weights });
    }
    FilterBank { bands }
}

fn filterbank() -> &'static FilterBank {
    static FB: OnceLock<FilterBank> = OnceLock::new();
    FB.get_or_init(build_filterbank)
}

/// Dense triangular filterbank weights [band][fft_bin].
pub fn filterbank_dense() -> Vec<Vec<f64>> {
    let fb = filterbank();
    fb.bands
        .iter()
        .map(|b| {
            let mut row = vec![0.0; N_FFT / 2 + 1];
            for (i, &w) in b.weights.iter().enumerate() {
                row[b.first_bin + i] = w;
            }
            row
        })
        .collect()
}

fn fft_plan() -> &'static Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT))
}

fn hann_window() -> &'static Vec<f64> {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..WIN_SAMPLES)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / WIN_SAMPLES as f64).cos()))
            .collect()
    })
}

/// Log-mel spectrogram of one 0.96 s snippet: 25 ms Hann frames at 10 ms hop
/// (tail reflect-padded so exactly 96 frames fit), power spectrum, 64
/// triangular HTK-mel filters over 125-7500 Hz, then ln(max(e, 1e-5)).
pub fn log_mel(snippet: &[f32]) -> Result<LogMelPatch, FeatureError> {
    if snippet.len() != SNIPPET_SAMPLES {
        return Err(FeatureError::WrongSnippetLength { got: snippet.len(), want: SNIPPET_SAMPLES });
    }
    let mut padded = vec![0.0f64; SNIPPET_SAMPLES + TAIL_PAD];
    for (i, &s) in snippet.iter().enumerate() {
        padded[i] = f64::from(s);
    }
    for i in 0..TAIL_PAD {
        padded[SNIPPET_SAMPLES + i] = padded[SNIPPET_SAMPLES - 2 - i];
    }

    let fft = fft_plan();
    let win = hann_window();
    let fb = filterbank();
    let mut values = vec![0.0f64; N_FRAMES * N_MELS];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; N_FFT / 2 + 1];
    for t in 0..N_FRAMES {
        let start = t * HOP_SAMPLES;
        for n in 0..WIN_SAMPLES {
            buf[n] = Complex::new(padded[start + n] * win[n], 0.0);
        }
        for b in buf[WIN_SAMPLES..].iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].re * buf[k].re + buf[k].im * buf[k].im;
        }
        for (m, band) in fb.bands.iter().enumerate() {
            let mut e = 0.0;
            for (i, &w) in band.weights.iter().enumerate() {
                e += w * power[band.first_bin + i];
            }
            values[t * N_MELS + m] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(LogMelPatch { values })
}

/// SpecAugment: single-point piecewise-linear time warp, then frequency and
/// time masks filled with the (post-warp) patch mean. Deterministic per seed.
pub fn spec_augment(
    patch: &LogMelPatch,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<LogMelPatch, FeatureError> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = patch.clone();

    if policy.warp_enabled && policy.max_time_warp > 0 {
        let w = policy.max_time_warp;
        let anchor = rng.random_range(w..N_FRAMES - w);
        let shift = rng.random_range(-(w as i64)..=w as i64);
        if shift != 0 {
            out = time_warp(&out, anchor, shift);
        }
    }

    if policy.masks_enabled {
        let mean = out.values.iter().sum::<f64>() / out.values.len() as f64;
        for _ in 0..policy.n_freq_masks {
            let width = rng.random_range(0..=policy.max_mask_width);
            let start = rng.random_range(0..=N_MELS - width);
            for t in 0..N_FRAMES {
                for f in start..start + width {
                    out.values[t * N_MELS + f] = mean;
                }
            }
        }
        for _ in 0..policy.n_time_masks {
            let width = rng.random_range(0..=policy.max_mask_width);
            let start = rng.random_range(0..=N_FRAMES - width);
            for t in start..start + width {
                for f in 0..N_MELS {
                    out.values[t * N_MELS + f] = mean;
                }
            }
        }
    }
    Ok(out)
}

/// Piecewise-linear resampling along time: `anchor` maps to `anchor+shift`,
/// endpoints stay fixed, rows in between are linearly interpolated.
fn time_warp(patch: &LogMelPatch, anchor: usize, shift: i64) -> LogMelPatch {
    let t_max = (N_FRAMES - 1) as f64;
    let a = anchor as f64;
    let a_dst = (anchor as i64 + shift) as f64;
    let mut out = vec![0.0f64; N_FRAMES * N_MELS];
    for r in 0..N_FRAMES {
        let rf = r as f64;
        let src = if rf <= a_dst {
            if a_dst == 0.0 { 0.0 } else { rf * a / a_dst }
        } else {
            a + (rf - a_dst) * (t_max - a) / (t_max - a_dst)
        };
        let lo = src.floor() as usize;
        let frac = src - lo as f64;
        if frac == 0.0 {
            out[r * N_MELS..(r + 1) * N_MELS]
                .copy_from_slice(&patch.values[lo * N_MELS..(lo + 1) * N_MELS]);
        } else {
            let hi = (lo + 1).min(N_FRAMES - 1);
            for f in 0..N_MELS {
                out[r * N_MELS + f] = (1.0 - frac) * patch.values[lo * N_MELS + f]
                    + frac * patch.values[hi * N_MELS + f];
            }
        }
    }
    LogMelPatch { values: out }
}

/// Full view pipeline: temporal-proximity snippet, log-mel, SpecAugment.
/// All substream seeds derive from the single `seed`.
pub fn make_view(
    clip: &[f32],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<LogMelPatch, FeatureError> {
    let sel = tp_sample(clip.len(), derive_seed(seed, "tp", 0))?;
    let snippet = &clip[sel.start_sample..sel.start_sample + sel.length_samples];
    let patch = log_mel(snippet)?;
    spec_augment(&patch, policy, derive_seed(seed, "sa", 0))
}

/// Log-mel patches over the fixed non-overlapping snippet grid of a clip.
pub fn grid_patches(clip: &[f32]) -> Result<Vec<LogMelPatch>, FeatureError> {
    if clip.len() < SNIPPET_SAMPLES {
        return Err(FeatureError::ClipTooShort { got: clip.len(), want: SNIPPET_SAMPLES });
    }
    let n = clip.len() / SNIPPET_SAMPLES;
    (0..n)
        .map(|i| log_mel(&clip[i * SNIPPET_SAMPLES..(i + 1) * SNIPPET_SAMPLES]))
        .collect()
}

/// Clip-level 64-dim feature: band means averaged over the snippet grid.
pub fn clip_mean_log_mel(clip: &[f32]) -> Result<Vec<f64>, FeatureError> {
    let patches = grid_patches(clip)?;
    let mut out = vec![0.0f64; N_MELS];
    for p in &patches {
        for (o, b) in out.iter_mut().zip(p.band_means()) {
            *o += b;
        }
    }
    for v in &mut out {
        *v /= patches.len() as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, amp: f64) -> Vec<f32> {
        (0..n)
            .map(|i| {
                (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32
            })
            .collect()
    }

    #[test]
    fn snippet_length_is_the_expected_constant() {
        assert_eq!(SNIPPET_SAMPLES, (0.96 * SAMPLE_RATE as f64) as usize);
    }

    #[test]
    fn zero_snippet_hits_log_floor_everywhere() {
        let patch = log_mel(&vec![0.0f32; SNIPPET_SAMPLES]).unwrap();
        let want = LOG_FLOOR.ln();
        assert!(patch.values().iter().all(|&v| v == want));
    }

    #[test]
    fn log_mel_shape_is_96_by_64() {
        let patch = log_mel(&tone(440.0, SNIPPET_SAMPLES, 0.5)).unwrap();
        assert_eq!(patch.frames(), 96);
        assert_eq!(patch.bands(), 64);
        assert_eq!(patch.values().len(), 96 * 64);
        assert!(log_mel(&vec![0.0f32; 100]).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_filterbank_peak_band() {
        // Independent transcription of the triangular-filter response: find
        // the band with the largest weight at 1 kHz.
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let imel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, hi) = (mel(125.0), mel(7500.0));
        let edge = |i: usize| imel(lo + (hi - lo) * i as f64 / 65.0);
        let f = 1000.0;
        let mut expected = 0;
        let mut best = f64::MIN;
        for m in 0..64 {
            let (a, c, b) = (edge(m), edge(m + 1), edge(m + 2));
            let w = ((f - a) / (c - a)).min((b - f) / (b - c)).max(0.0);
            if w > best {
                best = w;
                expected = m;
            }
        }
        let patch = log_mel(&tone(1000.0, SNIPPET_SAMPLES, 0.5)).unwrap();
        for t in 0..N_FRAMES {
            let row = &patch.values()[t * N_MELS..(t + 1) * N_MELS];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn log_mel_is_scale_monotone() {
        let mut rng = crate::rng::rng_for(21, "mono", 0);
        use rand::Rng;
        for trial in 0..10 {
            let snippet: Vec<f32> =
                (0..SNIPPET_SAMPLES).map(|_| rng.random_range(-0.1..0.1)).collect();
            let scaled: Vec<f32> = snippet.iter().map(|&s| s * 3.0).collect();
            let a = log_mel(&snippet).unwrap();
            let b = log_mel(&scaled).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!(y >= x, "trial {trial}: cell decreased after amplification");
            }
        }
    }

    #[test]
    fn disabled_policy_is_identity() {
        let patch = log_mel(&tone(700.0, SNIPPET_SAMPLES, 0.4)).unwrap();
        let out = spec_augment(&patch, &AugmentationPolicy::disabled(), 123).unwrap();
        assert_eq!(out, patch);
        let zeroed = AugmentationPolicy {
            max_mask_width: 0,
            max_time_warp: 0,
            warp_enabled: true,
            masks_enabled: true,
            ..AugmentationPolicy::specaugment()
        };
        let out = spec_augment(&patch, &zeroed, 123).unwrap();
        assert_eq!(out, patch);
    }

    #[test]
    fn mask_budget_holds_over_seeded_draws() {
        // isolate each mask type so altered rows/columns are attributable
        let patch = log_mel(&tone(300.0, SNIPPET_SAMPLES, 0.4)).unwrap();
        let freq_only = AugmentationPolicy {
            warp_enabled: false,
            n_time_masks: 0,
            ..AugmentationPolicy::specaugment()
        };
        let time_only = AugmentationPolicy {
            warp_enabled: false,
            n_freq_masks: 0,
            ..AugmentationPolicy::specaugment()
        };
        for seed in 0..1000u64 {
            let out = spec_augment(&patch, &freq_only, seed).unwrap();
            let changed_cols = (0..N_MELS)
                .filter(|&f| (0..N_FRAMES).any(|t| out.at(t, f) != patch.at(t, f)))
                .count();
            let budget = freq_only.n_freq_masks * freq_only.max_mask_width;
            assert!(changed_cols <= budget, "seed {seed}: cols {changed_cols}");

            let out = spec_augment(&patch, &time_only, seed).unwrap();
            let changed_rows = (0..N_FRAMES)
                .filter(|&t| (0..N_MELS).any(|f| out.at(t, f) != patch.at(t, f)))
                .count();
            let budget = time_only.n_time_masks * time_only.max_mask_width;
            assert!(changed_rows <= budget, "seed {seed}: rows {changed_rows}");
        }
    }

    #[test]
    fn masks_leave_other_cells_untouched() {
        let patch = log_mel(&tone(1500.0, SNIPPET_SAMPLES, 0.4)).unwrap();
        let policy = AugmentationPolicy { warp_enabled: false, ..AugmentationPolicy::specaugment() };
        let out = spec_augment(&patch, &policy, 7).unwrap();
        let changed_cols: Vec<usize> = (0..N_MELS)
            .filter(|&f| (0..N_FRAMES).any(|t| out.at(t, f) != patch.at(t, f)))
            .collect();
        let changed_rows: Vec<usize> = (0..N_FRAMES)
            .filter(|&t| (0..N_MELS).any(|f| out.at(t, f) != patch.at(t, f)))
            .collect();
        for t in 0..N_FRAMES {
            for f in 0..N_MELS {
                if !changed_rows.contains(&t) && !changed_cols.contains(&f) {
                    assert_eq!(out.at(t, f), patch.at(t, f));
                }
            }
        }
    }

    #[test]
    fn tp_sample_forced_start_and_length() {
        let sel = tp_sample(SNIPPET_SAMPLES, 99).unwrap();
        assert_eq!(sel.start_sample, 0);
        assert_eq!(sel.length_samples, 15_360);
        assert!(tp_sample(SNIPPET_SAMPLES - 1, 0).is_err());
    }

    #[test]
    fn tp_sample_starts_are_uniform() {
        // chi-square over 8 bins, 10k draws; critical value chi2(7, 0.01).
        let clip = 4 * SAMPLE_RATE + 4 * SAMPLE_RATE / 5; // 4.8 s
        let span = clip - SNIPPET_SAMPLES + 1;
        let mut counts = [0usize; 8];
        for seed in 0..10_000u64 {
            let sel = tp_sample(clip, derive_seed(42, "tpuniform", seed)).unwrap();
            let bin = (sel.start_sample * 8 / span).min(7);
            counts[bin] += 1;
        }
        let expected = 10_000.0 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 18.4753, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn make_view_is_deterministic_and_seed_sensitive() {
        let clip = tone(600.0, 2 * SNIPPET_SAMPLES, 0.5);
        let policy = AugmentationPolicy::specaugment();
        let a = make_view(&clip, &policy, 77).unwrap();
        let b = make_view(&clip, &policy, 77).unwrap();
        assert_eq!(a, b);
        let mut any_diff = false;
        for seed in 0..100 {
            if make_view(&clip, &policy, seed).unwrap() != a {
                any_diff = true;
                break;
            }
        }
        assert!(any_diff);
    }

    #[test]
    fn make_view_disabled_on_exact_snippet_equals_log_mel() {
        let clip = tone(600.0, SNIPPET_SAMPLES, 0.5);
        let view = make_view(&clip, &AugmentationPolicy::disabled(), 5).unwrap();
        assert_eq!(view, log_mel(&clip).unwrap());
    }

    #[test]
    fn spec_augment_preserves_shape() {
        let patch = log_mel(&tone(250.0, SNIPPET_SAMPLES, 0.6)).unwrap();
        for seed in 0..50 {
            let out = spec_augment(&patch, &AugmentationPolicy::specaugment(), seed).unwrap();
            assert_eq!(out.values().len(), 96 * 64);
        }
    }
}
