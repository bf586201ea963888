//! Batch construction and the training loop.
//!
//! Each clip in a batch gets one processor-bank draw shared by both proxy
//! tasks; channel picks for the similarity and coincidence views are drawn
//! independently. Every random decision is keyed on (run seed, step, slot),
//! so a run can be resumed from a checkpoint bit-exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::eval::{clip_embeddings, qbe_map_from_embeddings, EvalError};
use crate::features::{make_view, AugmentationPolicy, LogMelPatch};
use crate::losses::{coincidence_loss_node, nt_xent_node, LossError};
use crate::model::{
    coin_head_pair_grid, encoder_forward, insert_param_leaves, patches_to_tensor, sim_head_forward,
    ModelError, ModelState,
};
use crate::nn::{checkpoint, AdamConfig, Graph, NnError, Tensor};
use crate::processors::{bank_process, ProcessorBank, ProcessorError, SeparationOutput};
use crate::rng::{derive_seed, rng_for};
use crate::scenegen::SoundScene;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step} (sim {sim:?}, coin {coin:?})")]
    NonFiniteLoss { step: u64, sim: Option<f64>, coin: Option<f64> },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("batch size {got} too small for the enabled tasks; need {want}")]
    BatchTooSmall { got: usize, want: usize },
    #[error("metric log i/o failed at step {step}: {source}")]
    Io { step: u64, source: std::io::Error },
    #[error(transparent)]
    Processor(#[from] ProcessorError),
    #[error("view construction failed: {0}")]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which signals form a positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonMode {
    MixVsChan,
    ChanVsChan,
    MixVsAny,
    /// No-separation baseline: both views come from the mixture.
    MixVsMix,
}

impl ComparisonMode {
    pub fn label(&self) -> &'static str {
        match self {
            ComparisonMode::MixVsChan => "mix_vs_chan",
            ComparisonMode::ChanVsChan => "chan_vs_chan",
            ComparisonMode::MixVsAny => "mix_vs_any",
            ComparisonMode::MixVsMix => "mix_vs_mix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mix_vs_chan" => Some(ComparisonMode::MixVsChan),
            "chan_vs_chan" => Some(ComparisonMode::ChanVsChan),
            "mix_vs_any" => Some(ComparisonMode::MixVsAny),
            "mix_vs_mix" => Some(ComparisonMode::MixVsMix),
            _ => None,
        }
    }

    fn needs_channels(&self) -> bool {
        !matches!(self, ComparisonMode::MixVsMix)
    }
}

/// Which proxy tasks are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    SimOnly,
    CoinOnly,
    Joint,
}

impl TaskMode {
    pub fn label(&self) -> &'static str {
        match self {
            TaskMode::SimOnly => "sim_only",
            TaskMode::CoinOnly => "coin_only",
            TaskMode::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sim_only" => Some(TaskMode::SimOnly),
            "coin_only" => Some(TaskMode::CoinOnly),
            "joint" => Some(TaskMode::Joint),
            _ => None,
        }
    }

    pub fn sim_enabled(&self) -> bool {
        matches!(self, TaskMode::SimOnly | TaskMode::Joint)
    }

    pub fn coin_enabled(&self) -> bool {
        matches!(self, TaskMode::CoinOnly | TaskMode::Joint)
    }

    /// 3e-4 for similarity-only runs, 1e-4 whenever coincidence is involved.
    pub fn default_lr(&self) -> f64 {
        match self {
            TaskMode::SimOnly => 3e-4,
            _ => 1e-4,
        }
    }

    fn tracked_prefixes(&self) -> Vec<&'static str> {
        match self {
            TaskMode::SimOnly => vec!["encoder.", "sim_head."],
            TaskMode::CoinOnly => vec!["encoder.", "coin_head."],
            TaskMode::Joint => vec!["encoder.", "sim_head.", "coin_head."],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: ComparisonMode,
    pub tasks: TaskMode,
    pub bank: ProcessorBank,
    pub policy: AugmentationPolicy,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub steps: u64,
    pub seed: u64,
    /// QbE evaluation cadence in steps; 0 disables in-training eval.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; the final state is always written.
    pub checkpoint_every: u64,
    pub encoder: crate::model::EncoderConfig,
    /// Provenance digest copied into checkpoints and reports.
    pub config_digest: String,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let min = if self.tasks.coin_enabled() { 2 } else { 1 };
        if self.batch_size < min {
            return Err(TrainError::BatchTooSmall { got: self.batch_size, want: min });
        }
        Ok(())
    }
}

/// Where one view's waveform came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSource {
    Mixture,
    Channel(usize),
}

/// The up-to-four augmented views of one clip for one training step.
#[derive(Debug, Clone)]
pub struct PairedViews {
    pub clip_id: String,
    pub sim: Option<(LogMelPatch, LogMelPatch)>,
    pub coin: Option<(LogMelPatch, LogMelPatch)>,
    pub sim_sources: Option<(ViewSource, ViewSource)>,
    pub coin_sources: Option<(ViewSource, ViewSource)>,
    /// Kept when the mode used the processor bank, for stem bookkeeping.
    pub separation: Option<SeparationOutput>,
}

fn pick_sources(mode: ComparisonMode, m: usize, rng: &mut impl Rng) -> (ViewSource, ViewSource) {
    match mode {
        ComparisonMode::MixVsMix => (ViewSource::Mixture, ViewSource::Mixture),
        ComparisonMode::MixVsChan => {
            let c = rng.random_range(0..m);
            (ViewSource::Mixture, ViewSource::Channel(c))
        }
        ComparisonMode::ChanVsChan => {
            let c = rng.random_range(0..m);
            (ViewSource::Channel(c), ViewSource::Channel((c + 1) % m))
        }
        ComparisonMode::MixVsAny => {
            let pick = rng.random_range(0..=m);
            let b = if pick == 0 { ViewSource::Mixture } else { ViewSource::Channel(pick - 1) };
            (ViewSource::Mixture, b)
        }
    }
}

/// Builds the views of one clip: one bank draw shared by both tasks,
/// independent channel picks and augmentation instances per view.
pub fn build_pair(
    scene: &SoundScene,
    mode: ComparisonMode,
    tasks: TaskMode,
    bank: &ProcessorBank,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<PairedViews, TrainError> {
    let separation = if mode.needs_channels() {
        Some(bank_process(bank, scene, derive_seed(seed, "bankdraw", 0))?)
    } else {
        None
    };
    let m = separation.as_ref().map_or(2, |s| s.m());

    let waveform = |src: ViewSource| -> &[f32] {
        match src {
            ViewSource::Mixture => &scene.mixture,
            ViewSource::Channel(c) => &separation.as_ref().expect("channels").channels[c],
        }
    };

    let mut build_task = |tag: u64| -> Result<((ViewSource, ViewSource), (LogMelPatch, LogMelPatch)), TrainError> {
        let mut rng = rng_for(seed, "channelpick", tag);
        let sources = pick_sources(mode, m, &mut rng);
        let view_a = make_view(waveform(sources.0), policy, derive_seed(seed, "view", tag * 2))?;
        let view_b = make_view(waveform(sources.1), policy, derive_seed(seed, "view", tag * 2 + 1))?;
        Ok((sources, (view_a, view_b)))
    };

    let (sim_sources, sim) = if tasks.sim_enabled() {
        let (s, v) = build_task(0)?;
        (Some(s), Some(v))
    } else {
        (None, None)
    };
    let (coin_sources, coin) = if tasks.coin_enabled() {
        let (s, v) = build_task(1)?;
        (Some(s), Some(v))
    } else {
        (None, None)
    };

    Ok(PairedViews {
        clip_id: scene.clip_id.clone(),
        sim,
        coin,
        sim_sources,
        coin_sources,
        separation,
    })
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub sim: Option<f64>,
    pub coin: Option<f64>,
    pub joint: f64,
}

/// One forward/backward/update step over a batch of paired views.
pub fn train_step(
    views: &[PairedViews],
    state: &mut ModelState,
    config: &TrainConfig,
    step: u64,
) -> Result<StepLosses, TrainError> {
    config.validate()?;
    let n = views.len();
    let mut g = Graph::new();
    let leaves = insert_param_leaves(&mut g, state, &config.tasks.tracked_prefixes());

    let mut sim_loss_node = None;
    if config.tasks.sim_enabled() {
        let mut patches: Vec<&LogMelPatch> = Vec::with_capacity(2 * n);
        for v in views {
            let (a, b) = v.sim.as_ref().expect("sim views");
            patches.push(a);
            patches.push(b);
        }
        let input = g.leaf(patches_to_tensor(&patches)?, false);
        let h = encoder_forward(&mut g, state, &leaves, input)?;
        let z = sim_head_forward(&mut g, state, &leaves, h)?;
        sim_loss_node = Some(nt_xent_node(&mut g, z, config.tau)?);
    }

    let mut coin_loss_node = None;
    if config.tasks.coin_enabled() {
        let mut patches_a: Vec<&LogMelPatch> = Vec::with_capacity(n);
        let mut patches_b: Vec<&LogMelPatch> = Vec::with_capacity(n);
        for v in views {
            let (a, b) = v.coin.as_ref().expect("coin views");
            patches_a.push(a);
            patches_b.push(b);
        }
        let input_a = g.leaf(patches_to_tensor(&patches_a)?, false);
        let input_b = g.leaf(patches_to_tensor(&patches_b)?, false);
        let h_a = encoder_forward(&mut g, state, &leaves, input_a)?;
        let h_b = encoder_forward(&mut g, state, &leaves, input_b)?;
        let probs = coin_head_pair_grid(&mut g, state, &leaves, h_a, h_b)?;
        coin_loss_node = Some(coincidence_loss_node(&mut g, probs, n)?);
    }

    let loss_node = match (sim_loss_node, coin_loss_node) {
        (Some(s), Some(c)) => g.add(s, c)?,
        (Some(s), None) => s,
        (None, Some(c)) => c,
        (None, None) => unreachable!("at least one task is always enabled"),
    };

    let sim = sim_loss_node.map(|id| g.value(id).item().expect("scalar"));
    let coin = coin_loss_node.map(|id| g.value(id).item().expect("scalar"));
    let joint = g.value(loss_node).item().expect("scalar");
    if !joint.is_finite() {
        return Err(TrainError::NonFiniteLoss { step, sim, coin });
    }

    let grads = g.backward(loss_node)?;
    let per_param: Vec<Option<Tensor>> =
        leaves.iter().map(|&leaf| grads[leaf].clone()).collect();
    state.params.adam_step(&per_param, &AdamConfig::with_lr(config.lr))?;

    Ok(StepLosses { sim, coin, joint })
}

/// One metric-log row. `qbe_map` is only present at eval cadence.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub step: u64,
    pub loss_sim: Option<f64>,
    pub loss_coin: Option<f64>,
    pub loss_joint: Option<f64>,
    pub qbe_map: Option<f64>,
    pub wall_ms: u128,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub rows: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss_sim,loss_coin,loss_joint,qbe_map,wall_ms\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            fmt_opt(r.loss_sim),
            fmt_opt(r.loss_coin),
            fmt_opt(r.loss_joint),
            fmt_opt(r.qbe_map),
            r.wall_ms
        )
        .expect("format row");
    }
    out
}

/// Saves model parameters plus optimizer state.
pub fn save_state(path: &Path, state: &ModelState, step: u64) -> Result<(), NnError> {
    save_state_with_digest(path, state, step, "")
}

/// Saves with a provenance digest in the manifest metadata.
pub fn save_state_with_digest(
    path: &Path,
    state: &ModelState,
    step: u64,
    config_digest: &str,
) -> Result<(), NnError> {
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("step".to_string(), step.to_string());
    if !config_digest.is_empty() {
        meta.insert("config_digest".to_string(), config_digest.to_string());
    }
    meta.insert("input_pool".to_string(), state.encoder.input_pool.to_string());
    let chans: Vec<String> = state.encoder.channels.iter().map(|c| c.to_string()).collect();
    meta.insert("channels".to_string(), chans.join(";"));
    meta.insert("embed_dim".to_string(), state.encoder.embed_dim.to_string());
    meta.insert("embed_stride".to_string(), state.encoder.embed_stride.to_string());
    meta.insert("input_offset".to_string(), format!("{:e}", state.encoder.input_offset));
    meta.insert("input_scale".to_string(), format!("{:e}", state.encoder.input_scale));
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for p in &state.params.params {
        tensors.push((p.name.clone(), &p.value));
        tensors.push((format!("adam.m.{}", p.name), &p.m));
        tensors.push((format!("adam.v.{}", p.name), &p.v));
    }
    checkpoint::save_tensors(path, &meta, &tensors)
}

/// Loads a state written by [`save_state`]; returns the optimizer step.
pub fn load_state(path: &Path) -> Result<(ModelState, u64), NnError> {
    let ck = checkpoint::load_tensors(path)?;
    let bad = |why: &str| NnError::BadCheckpoint { path: path.display().to_string(), why: why.to_string() };
    let step: u64 = ck.meta.get("step").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing step"))?;
    let input_pool = ck.meta.get("input_pool").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing input_pool"))?;
    let channels: Vec<usize> = ck
        .meta
        .get("channels")
        .map(|s| s.split(';').filter_map(|x| x.parse().ok()).collect())
        .ok_or_else(|| bad("missing channels"))?;
    let embed_dim = ck.meta.get("embed_dim").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing embed_dim"))?;
    let embed_stride = ck.meta.get("embed_stride").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing embed_stride"))?;
    let input_offset: f64 = ck.meta.get("input_offset").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing input_offset"))?;
    let input_scale: f64 = ck.meta.get("input_scale").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing input_scale"))?;
    let encoder = crate::model::EncoderConfig { input_pool, channels, embed_dim, embed_stride, input_offset, input_scale };

    let mut params = crate::nn::ParamSet { params: Vec::new(), step };
    for (name, tensor) in &ck.tensors {
        if name.starts_with("adam.") {
            continue;
        }
        let m = ck.tensor(&format!("adam.m.{name}")).ok_or_else(|| bad("missing adam.m"))?.clone();
        let v = ck.tensor(&format!("adam.v.{name}")).ok_or_else(|| bad("missing adam.v"))?.clone();
        params.params.push(crate::nn::Param { name: name.clone(), value: tensor.clone(), m, v });
    }
    Ok((ModelState { encoder, params }, step))
}

/// Full training run from a freshly initialized model.
pub fn run_training(
    config: &TrainConfig,
    scenes: &[SoundScene],
    qbe_scenes: Option<&[SoundScene]>,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let state = ModelState::init(config.encoder.clone(), derive_seed(config.seed, "modelinit", 0));
    run_training_with_state(config, scenes, qbe_scenes, out_dir, state, 0)
}

/// Training loop from an explicit starting state; `start_step` steps are
/// assumed already taken (checkpoint resume).
pub fn run_training_with_state(
    config: &TrainConfig,
    scenes: &[SoundScene],
    qbe_scenes: Option<&[SoundScene]>,
    out_dir: &Path,
    mut state: ModelState,
    start_step: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io { step: start_step, source: e })?;
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();

    let save = |state: &ModelState, step: u64, checkpoints: &mut Vec<PathBuf>| -> Result<(), TrainError> {
        let path = out_dir.join(format!("ckpt_{step:06}.ckpt"));
        save_state_with_digest(&path, state, step, &config.config_digest).map_err(TrainError::Nn)?;
        checkpoints.push(path);
        Ok(())
    };

    if start_step == 0 {
        save(&state, 0, &mut checkpoints)?;
    }

    for step in start_step + 1..=config.steps {
        let t0 = Instant::now();
        let step_seed = derive_seed(config.seed, "step", step);
        let mut clip_rng = rng_for(step_seed, "clips", 0);
        let mut views = Vec::with_capacity(config.batch_size);
        for slot in 0..config.batch_size {
            let scene = &scenes[clip_rng.random_range(0..scenes.len())];
            views.push(build_pair(
                scene,
                config.mode,
                config.tasks,
                &config.bank,
                &config.policy,
                derive_seed(step_seed, "pair", slot as u64),
            )?);
        }
        let losses = train_step(&views, &mut state, config, step)?;

        let qbe = if config.eval_every > 0 && step % config.eval_every == 0 {
            match qbe_scenes {
                Some(clips) => {
                    let embs = clip_embeddings(clips, &state)?;
                    let n_classes = clips[0].labels.len();
                    Some(qbe_map_from_embeddings(&embs, n_classes)?.map)
                }
                None => None,
            }
        } else {
            None
        };

        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.steps {
            save(&state, step, &mut checkpoints)?;
        }

        rows.push(MetricRow {
            step,
            loss_sim: losses.sim,
            loss_coin: losses.coin,
            loss_joint: Some(losses.joint),
            qbe_map: qbe,
            wall_ms: t0.elapsed().as_millis(),
        });
    }

    if config.steps > start_step || start_step == 0 {
        if config.steps > 0 {
            save(&state, config.steps, &mut checkpoints)?;
        }
    }
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&rows))
        .map_err(|e| TrainError::Io { step: config.steps, source: e })?;

    Ok(TrainOutcome { state, rows, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::processors::ProcessorKind;
    use crate::scenegen::{generate_split, SceneConfig};

    fn tiny_config(tasks: TaskMode, mode: ComparisonMode, steps: u64) -> TrainConfig {
        TrainConfig {
            mode,
            tasks,
            bank: ProcessorBank::new(vec![ProcessorKind::S2]).unwrap(),
            policy: AugmentationPolicy::specaugment(),
            batch_size: 3,
            lr: tasks.default_lr(),
            tau: 0.3,
            steps,
            seed: 11,
            eval_every: 0,
            checkpoint_every: 0,
            encoder: EncoderConfig::reduced(16),
            config_digest: String::new(),
        }
    }

    fn tiny_scenes(n: usize) -> Vec<crate::scenegen::SoundScene> {
        let cfg = SceneConfig { clip_seconds: 1.2, ..SceneConfig::default() };
        generate_split(5, &cfg, n).unwrap()
    }

    fn views_for(config: &TrainConfig, scenes: &[crate::scenegen::SoundScene]) -> Vec<PairedViews> {
        (0..config.batch_size)
            .map(|slot| {
                build_pair(
                    &scenes[slot % scenes.len()],
                    config.mode,
                    config.tasks,
                    &config.bank,
                    &config.policy,
                    derive_seed(99, "pair", slot as u64),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn mix_vs_mix_uses_only_the_mixture() {
        let scenes = tiny_scenes(2);
        let config = tiny_config(TaskMode::Joint, ComparisonMode::MixVsMix, 1);
        for v in views_for(&config, &scenes) {
            assert_eq!(v.sim_sources.unwrap(), (ViewSource::Mixture, ViewSource::Mixture));
            assert_eq!(v.coin_sources.unwrap(), (ViewSource::Mixture, ViewSource::Mixture));
            assert!(v.separation.is_none());
        }
    }

    #[test]
    fn chan_vs_chan_on_two_stem_scene_has_disjoint_classes() {
        let cfg = SceneConfig { clip_seconds: 1.2, max_sources: 2, ..SceneConfig::default() };
        let scenes: Vec<_> = generate_split(7, &cfg, 40)
            .unwrap()
            .into_iter()
            .filter(|s| s.n_stems() == 2)
            .collect();
        assert!(!scenes.is_empty());
        let config = tiny_config(TaskMode::SimOnly, ComparisonMode::ChanVsChan, 1);
        for (i, scene) in scenes.iter().enumerate() {
            let v = build_pair(scene, config.mode, config.tasks, &config.bank, &config.policy, i as u64).unwrap();
            let sep = v.separation.as_ref().unwrap();
            let (sa, sb) = v.sim_sources.unwrap();
            let (ViewSource::Channel(ca), ViewSource::Channel(cb)) = (sa, sb) else {
                panic!("chan_vs_chan must pick channels");
            };
            assert_ne!(ca, cb);
            let classes_a = sep.channel_classes(scene, ca).unwrap();
            let classes_b = sep.channel_classes(scene, cb).unwrap();
            assert!(classes_a.iter().all(|c| !classes_b.contains(c)), "classes overlap");
        }
    }

    #[test]
    fn mix_vs_chan_channel_classes_are_a_subset() {
        let scenes = tiny_scenes(20);
        let config = tiny_config(TaskMode::SimOnly, ComparisonMode::MixVsChan, 1);
        for (i, scene) in scenes.iter().enumerate() {
            let v = build_pair(scene, config.mode, config.tasks, &config.bank, &config.policy, i as u64).unwrap();
            let sep = v.separation.as_ref().unwrap();
            let (sa, sb) = v.sim_sources.unwrap();
            assert_eq!(sa, ViewSource::Mixture);
            let ViewSource::Channel(cb) = sb else { panic!("view B must be a channel") };
            let classes_b = sep.channel_classes(scene, cb).unwrap();
            assert!(classes_b.iter().all(|c| scene.stem_classes.contains(c)));
        }
    }

    #[test]
    fn sim_only_leaves_coincidence_head_untouched() {
        let scenes = tiny_scenes(3);
        let config = tiny_config(TaskMode::SimOnly, ComparisonMode::MixVsChan, 1);
        let mut state = ModelState::init(config.encoder.clone(), 1);
        let before: Vec<Tensor> = state
            .params
            .params
            .iter()
            .filter(|p| p.name.starts_with("coin_head."))
            .map(|p| p.value.clone())
            .collect();
        let sim_before: Vec<Tensor> = state
            .params
            .params
            .iter()
            .filter(|p| p.name.starts_with("sim_head."))
            .map(|p| p.value.clone())
            .collect();
        let views = views_for(&config, &scenes);
        train_step(&views, &mut state, &config, 1).unwrap();
        let after: Vec<Tensor> = state
            .params
            .params
            .iter()
            .filter(|p| p.name.starts_with("coin_head."))
            .map(|p| p.value.clone())
            .collect();
        assert_eq!(before, after);
        let sim_after: Vec<Tensor> = state
            .params
            .params
            .iter()
            .filter(|p| p.name.starts_with("sim_head."))
            .map(|p| p.value.clone())
            .collect();
        assert_ne!(sim_before, sim_after, "similarity head must have moved");
    }

    #[test]
    fn coin_only_leaves_similarity_head_untouched() {
        let scenes = tiny_scenes(3);
        let config = tiny_config(TaskMode::CoinOnly, ComparisonMode::MixVsChan, 1);
        let mut state = ModelState::init(config.encoder.clone(), 1);
        let before: Vec<Tensor> = state
            .params
            .params
            .iter()
            .filter(|p| p.name.starts_with("sim_head."))
            .map(|p| p.value.clone())
            .collect();
        let views = views_for(&config, &scenes);
        train_step(&views, &mut state, &config, 1).unwrap();
        let after: Vec<Tensor> = state
            .params
            .params
            .iter()
            .filter(|p| p.name.starts_with("sim_head."))
            .map(|p| p.value.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn joint_encoder_gradient_is_sum_of_task_gradients() {
        let scenes = tiny_scenes(3);
        let config = tiny_config(TaskMode::Joint, ComparisonMode::MixVsChan, 1);
        let state = ModelState::init(config.encoder.clone(), 1);
        let views = views_for(&config, &scenes);

        // gradients under one task only, same views and parameters
        let grads_for = |tasks: TaskMode| -> Vec<Option<Tensor>> {
            let mut g = Graph::new();
            let leaves = insert_param_leaves(&mut g, &state, &["encoder."]);
            let mut loss_nodes = Vec::new();
            if tasks.sim_enabled() {
                let patches: Vec<&LogMelPatch> = views
                    .iter()
                    .flat_map(|v| {
                        let (a, b) = v.sim.as_ref().unwrap();
                        [a, b]
                    })
                    .collect();
                let input = g.leaf(patches_to_tensor(&patches).unwrap(), false);
                let h = encoder_forward(&mut g, &state, &leaves, input).unwrap();
                let z = sim_head_forward(&mut g, &state, &leaves, h).unwrap();
                loss_nodes.push(nt_xent_node(&mut g, z, config.tau).unwrap());
            }
            if tasks.coin_enabled() {
                let pa: Vec<&LogMelPatch> = views.iter().map(|v| &v.coin.as_ref().unwrap().0).collect();
                let pb: Vec<&LogMelPatch> = views.iter().map(|v| &v.coin.as_ref().unwrap().1).collect();
                let ia = g.leaf(patches_to_tensor(&pa).unwrap(), false);
                let ib = g.leaf(patches_to_tensor(&pb).unwrap(), false);
                let ha = encoder_forward(&mut g, &state, &leaves, ia).unwrap();
                let hb = encoder_forward(&mut g, &state, &leaves, ib).unwrap();
                let probs = coin_head_pair_grid(&mut g, &state, &leaves, ha, hb).unwrap();
                loss_nodes.push(coincidence_loss_node(&mut g, probs, views.len()).unwrap());
            }
            let loss = match loss_nodes.len() {
                1 => loss_nodes[0],
                2 => g.add(loss_nodes[0], loss_nodes[1]).unwrap(),
                _ => unreachable!(),
            };
            let grads = g.backward(loss).unwrap();
            leaves.iter().map(|&l| grads[l].clone()).collect()
        };

        let g_sim = grads_for(TaskMode::SimOnly);
        let g_coin = grads_for(TaskMode::CoinOnly);
        let g_joint = grads_for(TaskMode::Joint);
        for (i, p) in state.params.params.iter().enumerate() {
            if !p.name.starts_with("encoder.") {
                continue;
            }
            let (s, c, j) = (
                g_sim[i].as_ref().unwrap(),
                g_coin[i].as_ref().unwrap(),
                g_joint[i].as_ref().unwrap(),
            );
            for k in 0..s.numel() {
                let want = s.data()[k] + c.data()[k];
                let got = j.data()[k];
                let rel = (got - want).abs() / want.abs().max(got.abs()).max(1e-12);
                assert!(rel <= 1e-8, "{} coord {k}: {got} vs {want}", p.name);
            }
        }
    }

    #[test]
    fn zero_steps_only_writes_initial_checkpoint() {
        let scenes = tiny_scenes(2);
        let config = TrainConfig { steps: 0, ..tiny_config(TaskMode::SimOnly, ComparisonMode::MixVsMix, 0) };
        let dir = std::env::temp_dir().join("sepclr_trainer_zero_steps");
        let _ = std::fs::remove_dir_all(&dir);
        let out = run_training(&config, &scenes, None, &dir).unwrap();
        assert_eq!(out.rows.len(), 0);
        assert_eq!(out.checkpoints.len(), 1);
        assert!(out.checkpoints[0].ends_with("ckpt_000000.ckpt"));
    }

    #[test]
    fn short_runs_are_bit_identical() {
        let scenes = tiny_scenes(4);
        let config = tiny_config(TaskMode::Joint, ComparisonMode::MixVsChan, 6);
        let dir_a = std::env::temp_dir().join("sepclr_trainer_det_a");
        let dir_b = std::env::temp_dir().join("sepclr_trainer_det_b");
        let _ = std::fs::remove_dir_all(&dir_a);
        let _ = std::fs::remove_dir_all(&dir_b);
        let a = run_training(&config, &scenes, None, &dir_a).unwrap();
        let b = run_training(&config, &scenes, None, &dir_b).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.loss_sim, rb.loss_sim);
            assert_eq!(ra.loss_coin, rb.loss_coin);
            assert_eq!(ra.loss_joint, rb.loss_joint);
        }
        for (pa, pb) in a.state.params.params.iter().zip(&b.state.params.params) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_transparent() {
        let scenes = tiny_scenes(4);
        let config = tiny_config(TaskMode::Joint, ComparisonMode::MixVsChan, 4);
        let dir_full = std::env::temp_dir().join("sepclr_trainer_resume_full");
        let dir_half = std::env::temp_dir().join("sepclr_trainer_resume_half");
        let dir_rest = std::env::temp_dir().join("sepclr_trainer_resume_rest");
        for d in [&dir_full, &dir_half, &dir_rest] {
            let _ = std::fs::remove_dir_all(d);
        }
        let full = run_training(&config, &scenes, None, &dir_full).unwrap();

        let half_cfg = TrainConfig { steps: 2, ..config.clone() };
        let half = run_training(&half_cfg, &scenes, None, &dir_half).unwrap();
        let ckpt = half.checkpoints.last().unwrap();
        let (loaded, step) = load_state(ckpt).unwrap();
        assert_eq!(step, 2);
        let rest = run_training_with_state(&config, &scenes, None, &dir_rest, loaded, step).unwrap();

        for (pa, pb) in full.state.params.params.iter().zip(&rest.state.params.params) {
            assert_eq!(pa.value, pb.value, "param {} diverged after resume", pa.name);
            assert_eq!(pa.m, pb.m);
            assert_eq!(pa.v, pb.v);
        }
        let tail_full: Vec<_> = full.rows.iter().map(|r| r.loss_joint).skip(2).collect();
        let tail_rest: Vec<_> = rest.rows.iter().map(|r| r.loss_joint).collect();
        assert_eq!(tail_full, tail_rest);
    }

    #[test]
    fn nan_parameters_abort_with_diagnostics() {
        let scenes = tiny_scenes(2);
        let config = tiny_config(TaskMode::SimOnly, ComparisonMode::MixVsMix, 1);
        let mut state = ModelState::init(config.encoder.clone(), 1);
        state.params.params[0].value.data_mut()[0] = f64::NAN;
        let views = views_for(&config, &scenes);
        let err = train_step(&views, &mut state, &config, 7);
        assert!(matches!(err, Err(TrainError::NonFiniteLoss { step: 7, .. })));
    }

    #[test]
    fn batch_size_validation_depends_on_tasks() {
        let mut config = tiny_config(TaskMode::Joint, ComparisonMode::MixVsMix, 1);
        config.batch_size = 1;
        assert!(matches!(config.validate(), Err(TrainError::BatchTooSmall { .. })));
        let mut config = tiny_config(TaskMode::SimOnly, ComparisonMode::MixVsMix, 1);
        config.batch_size = 1;
        assert!(config.validate().is_ok());
    }
}
