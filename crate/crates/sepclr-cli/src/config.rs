//! Flat key=value run configuration.
//!
//! One file drives every command; CLI `--set key=value` flags override
//! individual keys. Unknown keys are rejected so typos fail loudly, and the
//! canonicalized key/value listing is hashed into a digest that every output
//! artifact carries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sepclr::digest::sha256_hex;
use sepclr::features::AugmentationPolicy;
use sepclr::model::EncoderConfig;
use sepclr::processors::{ProcessorBank, ProcessorKind};
use sepclr::scenegen::SceneConfig;
use sepclr::trainer::{ComparisonMode, TaskMode, TrainConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// All run settings, resolved and validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub clip_seconds: f64,
    pub max_sources: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_clips: usize,
    pub qbe_clips: usize,
    pub ds_train_clips: usize,
    pub ds_val_clips: usize,
    pub ds_test_clips: usize,
    pub mode: ComparisonMode,
    pub tasks: TaskMode,
    pub bank: Vec<ProcessorKind>,
    pub specaugment: bool,
    pub batch: usize,
    pub lr: Option<f64>,
    pub tau: f64,
    pub steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub encoder_channels: Vec<usize>,
    pub input_pool: usize,
    pub embed_dim: usize,
    pub embed_stride: usize,
    pub s1_leakage: f64,
    pub f_taps: usize,
    pub n_gain_db: f64,
    pub n_kernel: usize,
    digest: String,
}

pub const SPLIT_NAMES: [&str; 5] = ["train", "qbe", "ds_train", "ds_val", "ds_test"];

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "n_classes",
    "clip_seconds",
    "max_sources",
    "data_dir",
    "out_dir",
    "train_clips",
    "qbe_clips",
    "ds_train_clips",
    "ds_val_clips",
    "ds_test_clips",
    "mode",
    "tasks",
    "bank",
    "specaugment",
    "batch",
    "lr",
    "tau",
    "steps",
    "eval_every",
    "checkpoint_every",
    "encoder_channels",
    "input_pool",
    "embed_dim",
    "embed_stride",
    "s1_leakage",
    "f_taps",
    "n_gain_db",
    "n_kernel",
];

/// Parses `key = value` lines; '#' starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        let mut map = parse_kv(&text)?;
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(err(format!("unknown key {key:?}")));
            }
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let parse_num = |k: &str, default: &str| -> Result<f64, ConfigError> {
            let v = get(k).unwrap_or(default);
            v.parse().map_err(|_| err(format!("{k}: not a number: {v:?}")))
        };
        let parse_int = |k: &str, default: &str| -> Result<u64, ConfigError> {
            let v = get(k).unwrap_or(default);
            v.parse().map_err(|_| err(format!("{k}: not an integer: {v:?}")))
        };
        let parse_bool = |k: &str, default: &str| -> Result<bool, ConfigError> {
            match get(k).unwrap_or(default) {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                v => Err(err(format!("{k}: not a boolean: {v:?}"))),
            }
        };

        let tasks = {
            let v = get("tasks").unwrap_or("sim_only");
            TaskMode::parse(v).ok_or_else(|| err(format!("tasks: unknown value {v:?}")))?
        };
        let mode = {
            let v = get("mode").unwrap_or("mix_vs_chan");
            ComparisonMode::parse(v).ok_or_else(|| err(format!("mode: unknown value {v:?}")))?
        };
        let s1_leakage = parse_num("s1_leakage", "0.3")?;
        let f_taps = parse_int("f_taps", "65")? as usize;
        let n_gain_db = parse_num("n_gain_db", "-6")?;
        let n_kernel = parse_int("n_kernel", "33")? as usize;
        let bank: Vec<ProcessorKind> = get("bank")
            .unwrap_or("S2")
            .split(',')
            .map(|name| match name.trim() {
                "S2" => Ok(ProcessorKind::S2),
                "S1" => Ok(ProcessorKind::S1 { leakage: s1_leakage }),
                "F" => Ok(ProcessorKind::F { taps: f_taps }),
                "N" => Ok(ProcessorKind::N { noise_gain_db: n_gain_db, kernel_len: n_kernel }),
                other => Err(err(format!("bank: unknown processor {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
        ProcessorBank::new(bank.clone()).map_err(|e| err(format!("bank: {e}")))?;

        let lr = match get("lr").unwrap_or("auto") {
            "auto" => None,
            v => Some(v.parse().map_err(|_| err(format!("lr: not a number: {v:?}")))?),
        };
        let encoder_channels: Vec<usize> = get("encoder_channels")
            .unwrap_or("8;16;32")
            .split(';')
            .map(|c| c.trim().parse().map_err(|_| err(format!("encoder_channels: bad entry {c:?}"))))
            .collect::<Result<_, _>>()?;

        let n_classes = parse_int("n_classes", "8")? as usize;
        if n_classes < 2 {
            return Err(err(format!("n_classes must be at least 2, got {n_classes}")));
        }
        let tau = parse_num("tau", "0.3")?;
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(err(format!("tau must lie in (0, 1], got {tau}")));
        }
        let batch = parse_int("batch", "64")? as usize;
        if batch < 2 {
            return Err(err(format!("batch must be at least 2, got {batch}")));
        }

        let mut config = Self {
            seed: parse_int("seed", "1")?,
            n_classes,
            clip_seconds: parse_num("clip_seconds", "4.8")?,
            max_sources: parse_int("max_sources", "3")? as usize,
            data_dir: PathBuf::from(get("data_dir").unwrap_or("data")),
            out_dir: PathBuf::from(get("out_dir").unwrap_or("runs/out")),
            train_clips: parse_int("train_clips", "2000")? as usize,
            qbe_clips: parse_int("qbe_clips", "320")? as usize,
            ds_train_clips: parse_int("ds_train_clips", "2000")? as usize,
            ds_val_clips: parse_int("ds_val_clips", "100")? as usize,
            ds_test_clips: parse_int("ds_test_clips", "400")? as usize,
            mode,
            tasks,
            bank,
            specaugment: parse_bool("specaugment", "true")?,
            batch,
            lr,
            tau,
            steps: parse_int("steps", "3000")?,
            eval_every: parse_int("eval_every", "250")?,
            checkpoint_every: parse_int("checkpoint_every", "0")?,
            encoder_channels,
            input_pool: parse_int("input_pool", "2")? as usize,
            embed_dim: parse_int("embed_dim", "128")? as usize,
            embed_stride: parse_int("embed_stride", "2")? as usize,
            s1_leakage,
            f_taps,
            n_gain_db,
            n_kernel,
            digest: String::new(),
        };
        config.digest = config.compute_digest();
        config.scene_config().map_err(|e| err(format!("scene settings: {e}")))?;
        Ok(config)
    }

    fn compute_digest(&self) -> String {
        let mut text = String::new();
        let chans: Vec<String> = self.encoder_channels.iter().map(|c| c.to_string()).collect();
        let bank: Vec<&str> = self.bank.iter().map(|k| k.label()).collect();
        writeln!(text, "seed={}", self.seed).unwrap();
        writeln!(text, "n_classes={}", self.n_classes).unwrap();
        writeln!(text, "clip_seconds={}", self.clip_seconds).unwrap();
        writeln!(text, "max_sources={}", self.max_sources).unwrap();
        writeln!(text, "splits={},{},{},{},{}", self.train_clips, self.qbe_clips, self.ds_train_clips, self.ds_val_clips, self.ds_test_clips).unwrap();
        writeln!(text, "mode={}", self.mode.label()).unwrap();
        writeln!(text, "tasks={}", self.tasks.label()).unwrap();
        writeln!(text, "bank={}", bank.join(",")).unwrap();
        writeln!(text, "specaugment={}", self.specaugment).unwrap();
        writeln!(text, "batch={}", self.batch).unwrap();
        writeln!(text, "lr={}", self.effective_lr()).unwrap();
        writeln!(text, "tau={}", self.tau).unwrap();
        writeln!(text, "steps={}", self.steps).unwrap();
        writeln!(text, "encoder={};{};{};{}", self.input_pool, chans.join(";"), self.embed_dim, self.embed_stride).unwrap();
        writeln!(text, "processors={};{};{};{}", self.s1_leakage, self.f_taps, self.n_gain_db, self.n_kernel).unwrap();
        sha256_hex(text.as_bytes())
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.tasks.default_lr())
    }

    pub fn scene_config(&self) -> Result<SceneConfig, ConfigError> {
        let config = SceneConfig {
            n_classes: self.n_classes,
            clip_seconds: self.clip_seconds,
            sample_rate: 16_000,
            max_sources: self.max_sources,
            round_robin_first_class: true,
            forced_first_class: None,
        };
        // surface invalid scene settings as config errors
        sepclr::scenegen::generate_scene(0, &config).map_err(|e| err(e.to_string()))?;
        Ok(config)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_pool: self.input_pool,
            channels: self.encoder_channels.clone(),
            embed_dim: self.embed_dim,
            embed_stride: self.embed_stride,
            ..EncoderConfig::desk_default()
        }
    }

    pub fn policy(&self) -> AugmentationPolicy {
        if self.specaugment {
            AugmentationPolicy::specaugment()
        } else {
            AugmentationPolicy::disabled()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            tasks: self.tasks,
            bank: ProcessorBank::new(self.bank.clone()).expect("validated bank"),
            policy: self.policy(),
            batch_size: self.batch,
            lr: self.effective_lr(),
            tau: self.tau,
            steps: self.steps,
            seed: self.seed,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            encoder: self.encoder_config(),
            config_digest: self.digest.clone(),
        }
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.data_dir.join(split)
    }

    pub fn split_seed(&self, split: &str) -> u64 {
        sepclr::rng::derive_seed(self.seed, &format!("split/{split}"), 0)
    }

    pub fn split_clips(&self, split: &str) -> usize {
        match split {
            "train" => self.train_clips,
            "qbe" => self.qbe_clips,
            "ds_train" => self.ds_train_clips,
            "ds_val" => self.ds_val_clips,
            "ds_test" => self.ds_test_clips,
            _ => 0,
        }
    }

    /// Whether training needs ground-truth stems in memory.
    pub fn needs_stems(&self) -> bool {
        self.mode != ComparisonMode::MixVsMix
            && self
                .bank
                .iter()
                .any(|k| matches!(k, ProcessorKind::S2 | ProcessorKind::S1 { .. }))
    }
}

/// An experiment matrix: shared base settings, named per-row overrides, and
/// one seed list shared by every row.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub base: BTreeMap<String, String>,
    pub rows: Vec<(String, BTreeMap<String, String>)>,
    pub seeds: Vec<u64>,
}

impl MatrixConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        let map = parse_kv(&text)?;
        let mut base = BTreeMap::new();
        let mut row_overrides: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut row_order: Vec<String> = Vec::new();
        let mut seeds: Vec<u64> = vec![1, 2, 3];
        for (k, v) in map {
            if k == "matrix_rows" {
                row_order = v.split(',').map(|r| r.trim().to_string()).collect();
            } else if k == "matrix_seeds" {
                seeds = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| err(format!("matrix_seeds: bad entry {s:?}"))))
                    .collect::<Result<_, _>>()?;
            } else if let Some(rest) = k.strip_prefix("row.") {
                let (row, key) = rest
                    .split_once('.')
                    .ok_or_else(|| err(format!("row key must be row.<name>.<key>, got {k:?}")))?;
                if key == "seed" || key == "data_dir" {
                    return Err(err(format!(
                        "row {row:?} overrides {key:?}; rows must share seeds and dataset splits"
                    )));
                }
                row_overrides.entry(row.to_string()).or_default().insert(key.to_string(), v);
            } else {
                base.insert(k, v);
            }
        }
        if row_order.is_empty() {
            return Err(err("matrix_rows is required"));
        }
        if seeds.is_empty() {
            return Err(err("matrix_seeds must not be empty"));
        }
        let mut rows = Vec::new();
        for name in row_order {
            let overrides = row_overrides.remove(&name).unwrap_or_default();
            rows.push((name, overrides));
        }
        if let Some(stray) = row_overrides.keys().next() {
            return Err(err(format!("row {stray:?} is configured but not listed in matrix_rows")));
        }
        Ok(Self { base, rows, seeds })
    }

    /// Resolved config for one (row, seed) cell.
    pub fn cell(&self, row: &str, seed: u64) -> Result<RunConfig, ConfigError> {
        let overrides = &self
            .rows
            .iter()
            .find(|(name, _)| name == row)
            .ok_or_else(|| err(format!("unknown row {row:?}")))?
            .1;
        let mut map = self.base.clone();
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        map.insert("seed".to_string(), seed.to_string());
        let out = map.get("out_dir").cloned().unwrap_or_else(|| "runs/matrix".to_string());
        map.insert("out_dir".to_string(), format!("{out}/{row}/seed{seed}"));
        RunConfig::from_map(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let config = RunConfig::from_map(BTreeMap::new()).unwrap();
        assert_eq!(config.batch, 64);
        assert_eq!(config.steps, 3000);
        assert_eq!(config.tau, 0.3);
        assert!((config.effective_lr() - 3e-4).abs() < 1e-12);
        assert_eq!(config.embed_dim, 128);
        assert!(!config.digest().is_empty());
    }

    #[test]
    fn coincidence_tasks_switch_the_default_lr() {
        let mut map = BTreeMap::new();
        map.insert("tasks".to_string(), "joint".to_string());
        let config = RunConfig::from_map(map).unwrap();
        assert!((config.effective_lr() - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut map = BTreeMap::new();
        map.insert("batchsize".to_string(), "64".to_string());
        assert!(RunConfig::from_map(map).is_err());
    }

    #[test]
    fn digests_differ_when_settings_differ() {
        let a = RunConfig::from_map(BTreeMap::new()).unwrap();
        let mut map = BTreeMap::new();
        map.insert("tau".to_string(), "0.5".to_string());
        let b = RunConfig::from_map(map).unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn matrix_rejects_per_row_seeds() {
        let dir = std::env::temp_dir().join("sepclr_cli_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_matrix.cfg");
        std::fs::write(&path, "matrix_rows = a\nrow.a.seed = 5\n").unwrap();
        let e = MatrixConfig::load(&path).unwrap_err();
        assert!(e.0.contains("share seeds"));
    }

    #[test]
    fn matrix_cells_resolve_with_shared_seeds() {
        let dir = std::env::temp_dir().join("sepclr_cli_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ok_matrix.cfg");
        std::fs::write(
            &path,
            "steps = 10\nmatrix_rows = base, chan\nrow.chan.mode = chan_vs_chan\nmatrix_seeds = 7, 8\n",
        )
        .unwrap();
        let m = MatrixConfig::load(&path).unwrap();
        assert_eq!(m.seeds, vec![7, 8]);
        let cell = m.cell("chan", 8).unwrap();
        assert_eq!(cell.seed, 8);
        assert_eq!(cell.mode.label(), "chan_vs_chan");
        assert_eq!(cell.steps, 10);
        let base = m.cell("base", 7).unwrap();
        assert_eq!(base.mode.label(), "mix_vs_chan");
    }
}
