//! Command implementations behind the CLI surface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sepclr::digest::{sha256_hex, MultiDigest};
use sepclr::eval::{
    classification_map, clip_embeddings, export_embeddings, qbe_map_from_embeddings, train_shallow,
    ClipEmbedding, EvalReport,
};
use sepclr::model::ModelState;
use sepclr::scenegen::{generate_split, read_split, split_digest, write_split, SoundScene};
use sepclr::trainer::{load_state, run_training, TrainOutcome};

use crate::config::{ConfigError, MatrixConfig, RunConfig, SPLIT_NAMES};

/// Failures that should exit with code 1 (runtime) vs 2 (config/usage).
#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Config(m) => write!(f, "{m}"),
            CmdError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CmdError {}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.0)
    }
}

fn runtime(e: impl std::fmt::Display) -> CmdError {
    CmdError::Runtime(e.to_string())
}

/// Digest over everything dataset generation depends on.
fn dataset_digest(config: &RunConfig) -> String {
    let mut text = String::new();
    writeln!(text, "seed={}", config.seed).unwrap();
    writeln!(text, "n_classes={}", config.n_classes).unwrap();
    writeln!(text, "clip_seconds={}", config.clip_seconds).unwrap();
    writeln!(text, "max_sources={}", config.max_sources).unwrap();
    for split in SPLIT_NAMES {
        writeln!(text, "{split}={}", config.split_clips(split)).unwrap();
    }
    sha256_hex(text.as_bytes())
}

fn stored_digests(config: &RunConfig) -> Option<(String, String)> {
    let text = std::fs::read_to_string(config.data_dir.join("digest.txt")).ok()?;
    let mut dataset = None;
    let mut files = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("dataset ") {
            dataset = Some(v.to_string());
        }
        if let Some(v) = line.strip_prefix("files ") {
            files = Some(v.to_string());
        }
    }
    Some((dataset?, files?))
}

fn combined_file_digest(config: &RunConfig) -> Result<String, CmdError> {
    let mut digest = MultiDigest::new();
    for split in SPLIT_NAMES {
        let d = split_digest(&config.split_dir(split)).map_err(runtime)?;
        digest.add(split, d.as_bytes());
    }
    Ok(digest.finish())
}

/// Generates (or verifies) the five dataset splits.
pub fn gen_data(config: &RunConfig, overwrite: bool) -> Result<(), CmdError> {
    let scene_cfg = config.scene_config()?;
    let expected_dataset = dataset_digest(config);

    if let Some((stored_dataset, stored_files)) = stored_digests(config) {
        if stored_dataset == expected_dataset {
            let actual = combined_file_digest(config)?;
            if actual == stored_files {
                println!("dataset already present and verified at {}", config.data_dir.display());
                return Ok(());
            }
        }
        if !overwrite {
            return Err(CmdError::Config(format!(
                "{} holds a different dataset; pass --overwrite to replace it",
                config.data_dir.display()
            )));
        }
    }

    for split in SPLIT_NAMES {
        let n = config.split_clips(split);
        let scenes = generate_split(config.split_seed(split), &scene_cfg, n).map_err(runtime)?;
        write_split(&config.split_dir(split), &scenes).map_err(runtime)?;
        println!("wrote {n} clips to {}", config.split_dir(split).display());
    }
    let files = combined_file_digest(config)?;
    let body = format!("dataset {expected_dataset}\nfiles {files}\n");
    std::fs::write(config.data_dir.join("digest.txt"), body).map_err(runtime)?;
    Ok(())
}

fn require_dataset(config: &RunConfig) -> Result<(), CmdError> {
    let Some((stored_dataset, _)) = stored_digests(config) else {
        return Err(CmdError::Config(format!(
            "no dataset at {}; run gen-data first",
            config.data_dir.display()
        )));
    };
    if stored_dataset != dataset_digest(config) {
        return Err(CmdError::Config(format!(
            "dataset at {} was generated with different settings",
            config.data_dir.display()
        )));
    }
    Ok(())
}

fn load_scenes(config: &RunConfig, split: &str, with_stems: bool) -> Result<Vec<SoundScene>, CmdError> {
    let dir = config.split_dir(split);
    if !dir.join("manifest.csv").exists() {
        return Err(CmdError::Config(format!("missing split {split:?} at {}", dir.display())));
    }
    read_split(&dir, with_stems).map_err(runtime)
}

/// Trains one configuration and writes checkpoints, the metric log and the
/// final evaluation report.
pub fn train(config: &RunConfig) -> Result<TrainOutcome, CmdError> {
    require_dataset(config)?;
    let train_scenes = load_scenes(config, "train", config.needs_stems())?;
    let qbe_scenes = load_scenes(config, "qbe", false)?;

    let tc = config.train_config();
    let state = ModelState::init(tc.encoder.clone(), sepclr::rng::derive_seed(config.seed, "modelinit", 0));
    println!(
        "training {} / {} ({} steps, lr {:.0e}, encoder {} params, total {} params)",
        config.mode.label(),
        config.tasks.label(),
        config.steps,
        tc.lr,
        state.encoder_param_count(),
        state.total_param_count()
    );
    let outcome = sepclr::trainer::run_training_with_state(
        &tc,
        &train_scenes,
        Some(&qbe_scenes),
        &config.out_dir,
        state,
        0,
    )
    .map_err(runtime)?;

    let final_ckpt = outcome.checkpoints.last().expect("final checkpoint").clone();
    let report = evaluate_checkpoint(config, &final_ckpt)?;
    let report_path = config.out_dir.join("eval_report.csv");
    std::fs::write(&report_path, report.to_csv()).map_err(runtime)?;
    println!(
        "qbe_map {:.4}  classification_map {:.4}  ({})",
        report.qbe_map,
        report.classification_map,
        report_path.display()
    );
    Ok(outcome)
}

fn embeddings_for(
    config: &RunConfig,
    state: &ModelState,
    split: &str,
) -> Result<Vec<ClipEmbedding>, CmdError> {
    let scenes = load_scenes(config, split, false)?;
    clip_embeddings(&scenes, state).map_err(runtime)
}

/// Full evaluation of one checkpoint: QbE retrieval plus the downstream
/// shallow classifier.
pub fn evaluate_checkpoint(config: &RunConfig, checkpoint: &Path) -> Result<EvalReport, CmdError> {
    require_dataset(config)?;
    let bytes = std::fs::read(checkpoint)
        .map_err(|e| CmdError::Runtime(format!("cannot read {}: {e}", checkpoint.display())))?;
    let checkpoint_id = sha256_hex(&bytes);
    let (state, _) = load_state(checkpoint).map_err(runtime)?;
    if state.embed_dim() != config.embed_dim {
        return Err(CmdError::Config(format!(
            "checkpoint embedding dim {} does not match configured {}",
            state.embed_dim(),
            config.embed_dim
        )));
    }

    let qbe_embs = embeddings_for(config, &state, "qbe")?;
    let qbe = qbe_map_from_embeddings(&qbe_embs, config.n_classes).map_err(runtime)?;

    let train_embs = embeddings_for(config, &state, "ds_train")?;
    let val_embs = embeddings_for(config, &state, "ds_val")?;
    let test_embs = embeddings_for(config, &state, "ds_test")?;
    let clf = train_shallow(
        &train_embs,
        &val_embs,
        config.n_classes,
        sepclr::rng::derive_seed(config.seed, "shallow", 0),
    )
    .map_err(runtime)?;
    let (per_class, map) = classification_map(&clf, &test_embs).map_err(runtime)?;

    Ok(EvalReport {
        qbe_per_class: qbe.per_class_ap,
        qbe_map: qbe.map,
        classification_per_class: per_class,
        classification_map: map,
        config_digest: config.digest().to_string(),
        checkpoint_id,
    })
}

pub fn eval(config: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<(), CmdError> {
    let report = evaluate_checkpoint(config, checkpoint)?;
    let default_path = config.out_dir.join(format!(
        "eval_{}.csv",
        checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into())
    ));
    let path = out.map(Path::to_path_buf).unwrap_or(default_path);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    std::fs::write(&path, report.to_csv()).map_err(runtime)?;
    println!(
        "qbe_map {:.4}  classification_map {:.4}  ({})",
        report.qbe_map,
        report.classification_map,
        path.display()
    );
    Ok(())
}

pub fn embed(config: &RunConfig, checkpoint: &Path, split: &str, out: &Path) -> Result<(), CmdError> {
    require_dataset(config)?;
    if !SPLIT_NAMES.contains(&split) {
        return Err(CmdError::Config(format!("unknown split {split:?}")));
    }
    let (state, _) = load_state(checkpoint).map_err(runtime)?;
    let embs = embeddings_for(config, &state, split)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    export_embeddings(out, &embs, state.embed_dim()).map_err(runtime)?;
    println!("wrote {} embeddings to {}", embs.len(), out.display());
    Ok(())
}

struct CellResult {
    row: String,
    seed: u64,
    qbe_map: Option<f64>,
    classification_map: Option<f64>,
    error: Option<String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every row over the shared seed list, collects per-metric means and
/// spreads, and reports pairwise deltas between rows.
pub fn matrix(matrix_path: &Path, overwrite: bool) -> Result<(), CmdError> {
    let matrix = MatrixConfig::load(matrix_path)?;
    // validate every cell before any compute
    for (row, _) in &matrix.rows {
        for &seed in &matrix.seeds {
            matrix.cell(row, seed)?;
        }
    }

    let mut results: Vec<CellResult> = Vec::new();
    for &seed in &matrix.seeds {
        // dataset is shared by all rows at this seed; generate it once
        let first_row = &matrix.rows[0].0;
        let config = matrix.cell(first_row, seed)?;
        gen_data(&config, overwrite)?;
        for (row, _) in &matrix.rows {
            let config = matrix.cell(row, seed)?;
            println!("== row {row} seed {seed} ==");
            match train(&config) {
                Ok(_) => {
                    let report_path = config.out_dir.join("eval_report.csv");
                    let report = std::fs::read_to_string(&report_path).map_err(runtime)?;
                    let find = |metric: &str| -> Option<f64> {
                        report.lines().find_map(|line| {
                            line.strip_prefix(&format!("{metric},,")).and_then(|v| v.parse().ok())
                        })
                    };
                    results.push(CellResult {
                        row: row.clone(),
                        seed,
                        qbe_map: find("qbe_map"),
                        classification_map: find("classification_map"),
                        error: None,
                    });
                }
                Err(e) => {
                    eprintln!("row {row} seed {seed} failed: {e}");
                    results.push(CellResult {
                        row: row.clone(),
                        seed,
                        qbe_map: None,
                        classification_map: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }

    let base_out = matrix
        .base
        .get("out_dir")
        .cloned()
        .unwrap_or_else(|| "runs/matrix".to_string());
    let mut csv = String::from("section,row,other,metric,value,spread,n\n");
    let mut table = String::new();
    writeln!(table, "{:16} {:>4} {:>18} {:>22}", "row", "n", "qbe_map", "classification_map").unwrap();
    let mut row_means: Vec<(String, Option<f64>, Option<f64>)> = Vec::new();
    for (row, _) in &matrix.rows {
        let qbe: Vec<f64> = results
            .iter()
            .filter(|r| &r.row == row)
            .filter_map(|r| r.qbe_map)
            .collect();
        let cls: Vec<f64> = results
            .iter()
            .filter(|r| &r.row == row)
            .filter_map(|r| r.classification_map)
            .collect();
        let failures = results.iter().filter(|r| &r.row == row && r.error.is_some()).count();
        if qbe.is_empty() {
            writeln!(table, "{row:16} {failures:>4} all seeds failed").unwrap();
            writeln!(csv, "row,{row},,qbe_map,,,0").unwrap();
            row_means.push((row.clone(), None, None));
            continue;
        }
        let (qm, qs) = mean_std(&qbe);
        let (cm, cs) = mean_std(&cls);
        writeln!(table, "{row:16} {:>4} {qm:>9.4} ± {qs:<6.4} {cm:>13.4} ± {cs:<6.4}", qbe.len()).unwrap();
        writeln!(csv, "row,{row},,qbe_map,{qm:.6},{qs:.6},{}", qbe.len()).unwrap();
        writeln!(csv, "row,{row},,classification_map,{cm:.6},{cs:.6},{}", cls.len()).unwrap();
        row_means.push((row.clone(), Some(qm), Some(cm)));
    }
    writeln!(table).unwrap();
    writeln!(table, "pairwise deltas (row minus other):").unwrap();
    for i in 0..row_means.len() {
        for j in 0..row_means.len() {
            if i == j {
                continue;
            }
            let (ra, qa, ca) = &row_means[i];
            let (rb, qb, cb) = &row_means[j];
            if let (Some(qa), Some(qb)) = (qa, qb) {
                writeln!(table, "  {ra} - {rb}: qbe_map {:+.4}", qa - qb).unwrap();
                writeln!(csv, "delta,{ra},{rb},qbe_map,{:.6},,", qa - qb).unwrap();
            }
            if let (Some(ca), Some(cb)) = (ca, cb) {
                writeln!(csv, "delta,{ra},{rb},classification_map,{:.6},,", ca - cb).unwrap();
            }
        }
    }
    for r in &results {
        writeln!(
            csv,
            "cell,{},seed{},qbe_map,{},,",
            r.row,
            r.seed,
            r.qbe_map.map(|v| format!("{v:.6}")).unwrap_or_else(|| "failed".into())
        )
        .unwrap();
    }
    std::fs::create_dir_all(&base_out).map_err(runtime)?;
    let report_path = PathBuf::from(&base_out).join("matrix_report.csv");
    std::fs::write(&report_path, csv).map_err(runtime)?;
    println!("{table}");
    println!("report written to {}", report_path.display());

    let any_failed = results.iter().any(|r| r.error.is_some());
    if any_failed {
        return Err(CmdError::Runtime("one or more matrix cells failed".into()));
    }
    Ok(())
}

/// Shared overrides plumbing for `--set key=value` flags.
pub fn parse_overrides(sets: &[String]) -> Result<Vec<(String, String)>, CmdError> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CmdError::Config(format!("--set expects key=value, got {s:?}")))
        })
        .collect()
}
