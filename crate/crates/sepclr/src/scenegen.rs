//! Deterministic synthetic sound scenes with ground-truth stems.
//!
//! Each scene mixes one to three acoustically distinct source events; the
//! mixture is always the exact f32 sum of the padded stems (ascending stem
//! index), which the separation surrogates rely on. Class labels come for
//! free, enabling retrieval and classification evaluation even though no
//! labels are ever used for representation learning.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::digest::MultiDigest;
use crate::features::SNIPPET_SAMPLES;
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("clip_seconds {got} is shorter than the 0.96 s snippet")]
    ClipTooShort { got: f64 },
    #[error("class count {got} out of range (2..=8)")]
    BadClassCount { got: usize },
    #[error("sample rate must be 16000, got {got}")]
    BadSampleRate { got: usize },
    #[error("max_sources {got} out of range (1..=3)")]
    BadMaxSources { got: usize },
    #[error("scene cache i/o failed for {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scene cache at {path}: {why}")]
    BadCache { path: String, why: String },
}

/// The eight source families. Parameter ranges keep families spectrally
/// separated while leaving wide within-class variation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFamily {
    ToneLow,
    ToneHigh,
    ChirpUp,
    ChirpDown,
    AmNoise,
    ClickTrain,
    HarmonicStack,
    NoiseBurst,
}

impl SourceFamily {
    pub const ALL: [SourceFamily; 8] = [
        SourceFamily::ToneLow,
        SourceFamily::ToneHigh,
        SourceFamily::ChirpUp,
        SourceFamily::ChirpDown,
        SourceFamily::AmNoise,
        SourceFamily::ClickTrain,
        SourceFamily::HarmonicStack,
        SourceFamily::NoiseBurst,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SourceFamily::ToneLow => "tone_low",
            SourceFamily::ToneHigh => "tone_high",
            SourceFamily::ChirpUp => "chirp_up",
            SourceFamily::ChirpDown => "chirp_down",
            SourceFamily::AmNoise => "am_noise",
            SourceFamily::ClickTrain => "click_train",
            SourceFamily::HarmonicStack => "harmonic_stack",
            SourceFamily::NoiseBurst => "noise_burst",
        }
    }
}

/// Class id to family mapping; class ids are 0..C-1 with C <= 8.
pub fn class_family(class_id: usize) -> SourceFamily {
    SourceFamily::ALL[class_id % SourceFamily::ALL.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_classes: usize,
    pub clip_seconds: f64,
    pub sample_rate: usize,
    pub max_sources: usize,
    /// When generating splits, force the first stem class of clip k to
    /// k mod C so every class is represented.
    pub round_robin_first_class: bool,
    /// Set by generate_split per clip; None draws the first class randomly.
    pub forced_first_class: Option<usize>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            clip_seconds: 4.8,
            sample_rate: 16_000,
            max_sources: 3,
            round_robin_first_class: true,
            forced_first_class: None,
        }
    }
}

impl SceneConfig {
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.sample_rate != 16_000 {
            return Err(SceneError::BadSampleRate { got: self.sample_rate });
        }
        if self.clip_samples() < SNIPPET_SAMPLES {
            return Err(SceneError::ClipTooShort { got: self.clip_seconds });
        }
        if self.n_classes < 2 || self.n_classes > 8 {
            return Err(SceneError::BadClassCount { got: self.n_classes });
        }
        if self.max_sources < 1 || self.max_sources > 3 {
            return Err(SceneError::BadMaxSources { got: self.max_sources });
        }
        Ok(())
    }
}

/// One synthesized source occurrence (waveform not yet padded to the clip).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEvent {
    pub class_id: usize,
    pub onset_s: f64,
    pub duration_s: f64,
    pub gain_db: f64,
    pub waveform: Vec<f32>,
}

/// Event metadata kept on the scene after the waveform has been folded into
/// the padded stem.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMeta {
    pub class_id: usize,
    pub onset_s: f64,
    pub duration_s: f64,
    pub gain_db: f64,
}

/// A labeled synthetic clip: mixture, per-source padded stems, multi-hot
/// labels and the seed it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SoundScene {
    pub clip_id: String,
    pub seed: u64,
    pub mixture: Vec<f32>,
    /// Zero-padded to clip length; mixture == sum of stems, ascending index.
    pub stems: Vec<Vec<f32>>,
    pub stem_classes: Vec<usize>,
    pub labels: Vec<u8>,
    pub events: Vec<EventMeta>,
}

impl SoundScene {
    pub fn n_stems(&self) -> usize {
        self.stem_classes.len()
    }

    /// Multi-hot labels as a compact string, e.g. "01001000".
    pub fn labels_string(&self) -> String {
        self.labels.iter().map(|&b| if b > 0 { '1' } else { '0' }).collect()
    }
}

/// Generates one scene deterministically from (seed, config).
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SoundScene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene", 0));
    let clip_samples = config.clip_samples();
    let c = config.n_classes;

    let n_sources = rng.random_range(1..=config.max_sources);
    let mut classes: Vec<usize> = Vec::with_capacity(n_sources);
    let first = match config.forced_first_class {
        Some(f) => f % c,
        None => rng.random_range(0..c),
    };
    classes.push(first);
    while classes.len() < n_sources {
        let cand = rng.random_range(0..c);
        if !classes.contains(&cand) {
            classes.push(cand);
        }
    }

    let mut stems: Vec<Vec<f32>> = Vec::with_capacity(n_sources);
    let mut events = Vec::with_capacity(n_sources);
    for &class_id in &classes {
        let event = synthesize_event(class_id, config, &mut rng);
        let mut stem = vec![0.0f32; clip_samples];
        let onset = (event.onset_s * config.sample_rate as f64).round() as usize;
        for (i, &s) in event.waveform.iter().enumerate() {
            stem[onset + i] = s;
        }
        stems.push(stem);
        events.push(EventMeta {
            class_id: event.class_id,
            onset_s: event.onset_s,
            duration_s: event.duration_s,
            gain_db: event.gain_db,
        });
    }

    let mut mixture = sum_stems(&stems, clip_samples);
    let peak = mixture.iter().fold(0.0f32, |a, &b| a.max(b.abs()));
    if peak > 0.95 {
        let scale = 0.95f32 / peak;
        for stem in &mut stems {
            for s in stem.iter_mut() {
                *s *= scale;
            }
        }
        // re-sum so the exact-consistency invariant survives the scaling
        mixture = sum_stems(&stems, clip_samples);
    }

    let mut labels = vec![0u8; c];
    for &cl in &classes {
        labels[cl] = 1;
    }

    Ok(SoundScene {
        clip_id: format!("c{:016x}", derive_seed(seed, "clipid", 0)),
        seed,
        mixture,
        stems,
        stem_classes: classes,
        labels,
        events,
    })
}

fn sum_stems(stems: &[Vec<f32>], clip_samples: usize) -> Vec<f32> {
    let mut mixture = vec![0.0f32; clip_samples];
    for stem in stems {
        for (m, &s) in mixture.iter_mut().zip(stem) {
            *m += s;
        }
    }
    mixture
}

/// Synthesizes one source event. Waveforms are peak-normalized to 0.9 before
/// the per-event gain so the peak never exceeds 1.0.
pub fn synthesize_event(class_id: usize, config: &SceneConfig, rng: &mut ChaCha8Rng) -> SourceEvent {
    let sr = config.sample_rate as f64;
    let clip = config.clip_seconds;
    let duration_s = rng.random_range(0.5 * clip..=clip);
    let onset_s = rng.random_range(0.0..=clip - duration_s);
    let gain_db = rng.random_range(-12.0..=0.0);
    let n = (duration_s * sr).round() as usize;

    let mut w = synthesize_family(class_family(class_id), n, sr, rng);

    let peak = w.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let gain = 10f64.powf(gain_db / 20.0);
    let scale = if peak > 0.0 { 0.9 * gain / peak } else { 0.0 };
    let waveform: Vec<f32> = w.drain(..).map(|s| (s * scale) as f32).collect();

    SourceEvent { class_id, onset_s, duration_s, gain_db, waveform }
}

fn synthesize_family(family: SourceFamily, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use std::f64::consts::PI;
    match family {
        SourceFamily::ToneLow => {
            let f0 = rng.random_range(150.0..450.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..n).map(|i| (2.0 * PI * f0 * i as f64 / sr + phase).sin()).collect()
        }
        SourceFamily::ToneHigh => {
            let f0 = rng.random_range(1800.0..4200.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..n).map(|i| (2.0 * PI * f0 * i as f64 / sr + phase).sin()).collect()
        }
        SourceFamily::ChirpUp => {
            let f0 = rng.random_range(350.0..700.0);
            let ratio = rng.random_range(2.0..3.5);
            let f1 = f0 * ratio;
            chirp(f0, f1, n, sr)
        }
        SourceFamily::ChirpDown => {
            let f0 = rng.random_range(3000.0..6000.0);
            let ratio = rng.random_range(2.0..3.5);
            let f1 = f0 / ratio;
            chirp(f0, f1, n, sr)
        }
        SourceFamily::AmNoise => {
            let rate = rng.random_range(2.0..8.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let noise = lowpass_noise(n, rng);
            noise
                .into_iter()
                .enumerate()
                .map(|(i, x)| x * (0.5 + 0.5 * (2.0 * PI * rate * i as f64 / sr + phase).sin()))
                .collect()
        }
        SourceFamily::ClickTrain => {
            let rate = rng.random_range(5.0..15.0);
            let period = (sr / rate) as usize;
            let click_len = 48usize;
            let mut w = vec![0.0f64; n];
            let mut start = rng.random_range(0..period.min(n.max(1)));
            while start < n {
                for i in 0..click_len.min(n - start) {
                    let env = (-(i as f64) / 8.0).exp();
                    w[start + i] += env * rng.random_range(-1.0..1.0);
                }
                start += period;
            }
            w
        }
        SourceFamily::HarmonicStack => {
            let f0 = rng.random_range(110.0..260.0);
            let n_harm = 6;
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1..=n_harm)
                        .map(|h| (2.0 * PI * h as f64 * f0 * t + phases[h - 1]).sin() / h as f64)
                        .sum()
                })
                .collect()
        }
        SourceFamily::NoiseBurst => highpass_noise(n, rng),
    }
}

fn chirp(f0: f64, f1: f64, n: usize, sr: f64) -> Vec<f64> {
    use std::f64::consts::PI;
    let t_total = n as f64 / sr;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let phase = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * t_total));
            phase.sin()
        })
        .collect()
}

/// White noise through two moving-average passes (window 32), concentrating
/// energy below roughly 500 Hz.
fn lowpass_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pass1 = moving_average(&white, 32);
    moving_average(&pass1, 32)
}

/// White noise minus its moving average: only the high band remains.
fn highpass_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let low = moving_average(&white, 16);
    white.iter().zip(&low).map(|(w, l)| w - l).collect()
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= window {
            acc -= x[i - window];
        }
        out[i] = acc / window.min(i + 1) as f64;
    }
    out
}

/// Generates `n_clips` scenes with per-clip derived seeds and distinct ids.
pub fn generate_split(seed: u64, config: &SceneConfig, n_clips: usize) -> Result<Vec<SoundScene>, SceneError> {
    config.validate()?;
    let mut scenes = Vec::with_capacity(n_clips);
    for k in 0..n_clips {
        let clip_seed = derive_seed(seed, "clip", k as u64);
        let mut cfg = config.clone();
        if config.round_robin_first_class {
            cfg.forced_first_class = Some(k % config.n_classes);
        }
        scenes.push(generate_scene(clip_seed, &cfg)?);
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// Scene cache: manifest.csv plus one raw f32-LE file per clip (mixture
// followed by stems).

const MANIFEST_NAME: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "clip_id,seed,labels,n_stems,clip_samples,stem_classes";

pub fn write_split(dir: &Path, scenes: &[SoundScene]) -> Result<(), SceneError> {
    let io_err = |p: &Path, e: std::io::Error| SceneError::Io { path: p.display().to_string(), source: e };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for s in scenes {
        let classes: Vec<String> = s.stem_classes.iter().map(|c| c.to_string()).collect();
        writeln!(
            manifest,
            "{},{},{},{},{},{}",
            s.clip_id,
            s.seed,
            s.labels_string(),
            s.n_stems(),
            s.mixture.len(),
            classes.join(";")
        )
        .expect("write manifest line");
        let path = dir.join(format!("{}.f32", s.clip_id));
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for &v in &s.mixture {
            w.write_all(&v.to_le_bytes()).map_err(|e| io_err(&path, e))?;
        }
        for stem in &s.stems {
            for &v in stem {
                w.write_all(&v.to_le_bytes()).map_err(|e| io_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    fs::write(dir.join(MANIFEST_NAME), manifest).map_err(|e| io_err(dir, e))?;
    Ok(())
}

/// Reads a split back. With `with_stems` false only mixtures are loaded,
/// which is all evaluation needs.
pub fn read_split(dir: &Path, with_stems: bool) -> Result<Vec<SoundScene>, SceneError> {
    let io_err = |p: &Path, e: std::io::Error| SceneError::Io { path: p.display().to_string(), source: e };
    let bad = |why: String| SceneError::BadCache { path: dir.display().to_string(), why };
    let manifest = fs::read_to_string(dir.join(MANIFEST_NAME)).map_err(|e| io_err(dir, e))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(bad("unexpected manifest header".into()));
    }
    let mut scenes = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(format!("malformed manifest line: {line}")));
        }
        let clip_id = fields[0].to_string();
        let seed: u64 = fields[1].parse().map_err(|_| bad(format!("bad seed in {line}")))?;
        let labels: Vec<u8> = fields[2].bytes().map(|b| if b == b'1' { 1 } else { 0 }).collect();
        let n_stems: usize = fields[3].parse().map_err(|_| bad(format!("bad n_stems in {line}")))?;
        let clip_samples: usize = fields[4].parse().map_err(|_| bad(format!("bad clip_samples in {line}")))?;
        let stem_classes: Vec<usize> = if fields[5].is_empty() {
            Vec::new()
        } else {
            fields[5]
                .split(';')
                .map(|s| s.parse().map_err(|_| bad(format!("bad stem class in {line}"))))
                .collect::<Result<_, _>>()?
        };

        let path = dir.join(format!("{clip_id}.f32"));
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .map_err(|e| io_err(&path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| io_err(&path, e))?;
        let want = clip_samples * (1 + n_stems) * 4;
        if bytes.len() != want {
            return Err(bad(format!("{clip_id}: file has {} bytes, want {want}", bytes.len())));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mixture = floats[..clip_samples].to_vec();
        let stems = if with_stems {
            (0..n_stems)
                .map(|i| floats[(1 + i) * clip_samples..(2 + i) * clip_samples].to_vec())
                .collect()
        } else {
            Vec::new()
        };
        scenes.push(SoundScene {
            clip_id,
            seed,
            mixture,
            stems,
            stem_classes,
            labels,
            events: Vec::new(),
        });
    }
    Ok(scenes)
}

/// Digest over the manifest and every clip file, for idempotency checks.
pub fn split_digest(dir: &Path) -> Result<String, SceneError> {
    let io_err = |p: &Path, e: std::io::Error| SceneError::Io { path: p.display().to_string(), source: e };
    let manifest = fs::read(dir.join(MANIFEST_NAME)).map_err(|e| io_err(dir, e))?;
    let mut digest = MultiDigest::new();
    digest.add("manifest", &manifest);
    let text = String::from_utf8_lossy(&manifest);
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let clip_id = line.split(',').next().unwrap_or("");
        let path = dir.join(format!("{clip_id}.f32"));
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        digest.add(clip_id, &bytes);
    }
    Ok(digest.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_source_mixture_equals_stem() {
        let config = SceneConfig { max_sources: 1, ..SceneConfig::default() };
        let scene = generate_scene(7, &config).unwrap();
        assert_eq!(scene.n_stems(), 1);
        assert_eq!(scene.mixture, scene.stems[0]);
    }

    #[test]
    fn mixture_is_exact_sum_of_stems() {
        let config = SceneConfig::default();
        for seed in 0..200u64 {
            let scene = generate_scene(seed, &config).unwrap();
            let mut sum = vec![0.0f32; scene.mixture.len()];
            for stem in &scene.stems {
                for (a, &b) in sum.iter_mut().zip(stem) {
                    *a += b;
                }
            }
            assert_eq!(sum, scene.mixture, "seed {seed}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = SceneConfig::default();
        let a = generate_scene(42, &config).unwrap();
        let b = generate_scene(42, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_match_stem_classes() {
        let config = SceneConfig::default();
        for seed in 0..100u64 {
            let scene = generate_scene(seed, &config).unwrap();
            for (c, &flag) in scene.labels.iter().enumerate() {
                assert_eq!(flag == 1, scene.stem_classes.contains(&c), "seed {seed} class {c}");
            }
            let mut sorted = scene.stem_classes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), scene.stem_classes.len(), "duplicate stem class");
        }
    }

    #[test]
    fn event_invariants_hold() {
        let config = SceneConfig::default();
        for seed in 0..100u64 {
            let scene = generate_scene(seed, &config).unwrap();
            for stem in &scene.stems {
                let peak = stem.iter().fold(0.0f32, |a, &b| a.max(b.abs()));
                assert!(peak <= 1.0);
            }
            for ev in &scene.events {
                assert!(ev.onset_s + ev.duration_s <= config.clip_seconds + 1e-9);
                assert!((-12.0..=0.0).contains(&ev.gain_db));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut config = SceneConfig { clip_seconds: 0.5, ..SceneConfig::default() };
        assert!(matches!(generate_scene(0, &config), Err(SceneError::ClipTooShort { .. })));
        config = SceneConfig { n_classes: 1, ..SceneConfig::default() };
        assert!(matches!(generate_scene(0, &config), Err(SceneError::BadClassCount { .. })));
        config = SceneConfig { n_classes: 9, ..SceneConfig::default() };
        assert!(matches!(generate_scene(0, &config), Err(SceneError::BadClassCount { .. })));
        config = SceneConfig { sample_rate: 8000, ..SceneConfig::default() };
        assert!(matches!(generate_scene(0, &config), Err(SceneError::BadSampleRate { .. })));
    }

    #[test]
    fn split_covers_every_class() {
        let config = SceneConfig::default();
        let scenes = generate_split(3, &config, 100).unwrap();
        assert_eq!(scenes.len(), 100);
        for c in 0..config.n_classes {
            assert!(scenes.iter().any(|s| s.labels[c] == 1), "class {c} missing");
        }
        let ids: std::collections::HashSet<_> = scenes.iter().map(|s| s.clip_id.clone()).collect();
        assert_eq!(ids.len(), 100, "clip ids must be distinct");
    }

    #[test]
    fn split_is_deterministic_and_single_clip_works() {
        let config = SceneConfig::default();
        let a = generate_split(9, &config, 5).unwrap();
        let b = generate_split(9, &config, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_split(9, &config, 1).unwrap().len(), 1);
    }

    #[test]
    fn cache_roundtrip_preserves_scenes() {
        let dir = std::env::temp_dir().join("sepclr_scene_cache_test");
        let _ = fs::remove_dir_all(&dir);
        let config = SceneConfig { clip_seconds: 0.96, ..SceneConfig::default() };
        let scenes = generate_split(11, &config, 4).unwrap();
        write_split(&dir, &scenes).unwrap();

        let loaded = read_split(&dir, true).unwrap();
        assert_eq!(loaded.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.clip_id, b.clip_id);
            assert_eq!(a.mixture, b.mixture);
            assert_eq!(a.stems, b.stems);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.stem_classes, b.stem_classes);
        }

        let no_stems = read_split(&dir, false).unwrap();
        assert!(no_stems.iter().all(|s| s.stems.is_empty()));

        // rewriting identical scenes leaves the digest unchanged
        let d1 = split_digest(&dir).unwrap();
        write_split(&dir, &scenes).unwrap();
        let d2 = split_digest(&dir).unwrap();
        assert_eq!(d1, d2);
    }
}
