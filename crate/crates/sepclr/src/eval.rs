//! Representation evaluation: query-by-example retrieval mAP over pairwise
//! cosine distances, and downstream classification mAP with a shallow MLP
//! trained on frozen clip embeddings.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::features::grid_patches;
use crate::losses::{cosine_similarity, LossError, PROB_FLOOR};
use crate::model::{encode_batch, ModelError, ModelState};
use crate::nn::{AdamConfig, Graph, NnError, NodeId, ParamSet, Tensor};
use crate::rng::rng_for;
use crate::scenegen::SoundScene;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no target trials")]
    NoTargets,
    #[error("distances and labels disagree: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("every class is degenerate; no AP can be computed")]
    AllClassesDegenerate,
    #[error("classifier needs at least two training clips, got {got}")]
    TooFewClips { got: usize },
    #[error("embedding dim {got} does not match expected {want}")]
    DimMismatch { got: usize, want: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("feature extraction failed: {0}")]
    Feature(#[from] crate::features::FeatureError),
    #[error("embedding i/o failed for {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid embedding file {path}: {why}")]
    BadFile { path: String, why: String },
}

/// Average precision of ranking targets ahead of non-targets, ascending by
/// distance. Ties keep input order (stable sort), so the trial order is part
/// of the contract.
pub fn average_precision(distances: &[f64], is_target: &[bool]) -> Result<f64, EvalError> {
    if distances.len() != is_target.len() {
        return Err(EvalError::LengthMismatch { lhs: distances.len(), rhs: is_target.len() });
    }
    let n_targets = is_target.iter().filter(|&&t| t).count();
    if n_targets == 0 {
        return Err(EvalError::NoTargets);
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).expect("comparable distances"));
    let mut hits = 0usize;
    let mut ap = 0.0f64;
    for (rank0, &idx) in order.iter().enumerate() {
        if is_target[idx] {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / n_targets as f64)
}

/// Clip-level embedding: mean of the per-snippet representations over the
/// fixed non-overlapping grid.
#[derive(Debug, Clone)]
pub struct ClipEmbedding {
    pub clip_id: String,
    pub labels: Vec<u8>,
    pub h: Vec<f64>,
}

/// Embeds clips with the frozen encoder, batching snippets for throughput.
pub fn clip_embeddings(scenes: &[SoundScene], state: &ModelState) -> Result<Vec<ClipEmbedding>, EvalError> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(32) {
        let mut patches = Vec::new();
        let mut counts = Vec::with_capacity(chunk.len());
        for scene in chunk {
            let grid = grid_patches(&scene.mixture)?;
            counts.push(grid.len());
            patches.extend(grid);
        }
        let refs: Vec<&crate::features::LogMelPatch> = patches.iter().collect();
        let embs = encode_batch(&refs, state)?;
        let d = state.embed_dim();
        let mut cursor = 0usize;
        for (scene, &count) in chunk.iter().zip(&counts) {
            let mut h = vec![0.0f64; d];
            for e in &embs[cursor..cursor + count] {
                for (a, b) in h.iter_mut().zip(e) {
                    *a += b;
                }
            }
            for v in &mut h {
                *v /= count as f64;
            }
            cursor += count;
            out.push(ClipEmbedding { clip_id: scene.clip_id.clone(), labels: scene.labels.clone(), h });
        }
    }
    Ok(out)
}

/// Per-class APs (None for classes without both targets and non-targets)
/// and their unweighted mean.
#[derive(Debug, Clone)]
pub struct QbeReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

/// QbE retrieval over clip embeddings: for each class, target trials are
/// all clip pairs that share it, non-target trials all (present, absent)
/// pairs; trials are ordered by clip-id pair and ranked by cosine distance.
pub fn qbe_map_from_embeddings(embs: &[ClipEmbedding], n_classes: usize) -> Result<QbeReport, EvalError> {
    let mut order: Vec<usize> = (0..embs.len()).collect();
    order.sort_by(|&a, &b| embs[a].clip_id.cmp(&embs[b].clip_id));

    // all pairwise cosine distances once
    let n = embs.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine_similarity(&embs[order[i]].h, &embs[order[j]].h)?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut per_class_ap: Vec<Option<f64>> = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let mut distances = Vec::new();
        let mut is_target = Vec::new();
        for i in 0..n {
            let pi = embs[order[i]].labels.get(class).copied().unwrap_or(0) == 1;
            for j in i + 1..n {
                let pj = embs[order[j]].labels.get(class).copied().unwrap_or(0) == 1;
                match (pi, pj) {
                    (true, true) => {
                        distances.push(dist[i * n + j]);
                        is_target.push(true);
                    }
                    (true, false) | (false, true) => {
                        distances.push(dist[i * n + j]);
                        is_target.push(false);
                    }
                    (false, false) => {}
                }
            }
        }
        let has_target = is_target.iter().any(|&t| t);
        let has_nontarget = is_target.iter().any(|&t| !t);
        if has_target && has_nontarget {
            per_class_ap.push(Some(average_precision(&distances, &is_target)?));
        } else {
            per_class_ap.push(None);
        }
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(EvalError::AllClassesDegenerate);
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(QbeReport { per_class_ap, map })
}

/// Embeds an eval split and scores retrieval.
pub fn qbe_map(state: &ModelState, scenes: &[SoundScene], n_classes: usize) -> Result<QbeReport, EvalError> {
    let embs = clip_embeddings(scenes, state)?;
    qbe_map_from_embeddings(&embs, n_classes)
}

/// One-hidden-layer MLP (512 ReLU units, C-way sigmoid output) trained on
/// frozen L2-normalized embeddings.
#[derive(Debug, Clone)]
pub struct ShallowClassifier {
    pub params: ParamSet,
    pub input_dim: usize,
    pub n_classes: usize,
}

pub const SHALLOW_HIDDEN: usize = 512;
const SHALLOW_LR: f64 = 1e-3;
const SHALLOW_BATCH: usize = 128;
const SHALLOW_MAX_EPOCHS: usize = 200;
const SHALLOW_PATIENCE: usize = 10;

fn l2_normalized(h: &[f64]) -> Vec<f64> {
    let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        h.to_vec()
    } else {
        h.iter().map(|x| x / norm).collect()
    }
}

fn classifier_forward(
    g: &mut Graph,
    params: &ParamSet,
    leaves: &[NodeId],
    x: NodeId,
) -> Result<NodeId, EvalError> {
    let idx = |name: &str| leaves[params.index_of(name).expect("classifier param")];
    let mut h = g.matmul(x, idx("fc1.w"), true)?;
    h = g.bias_row(h, idx("fc1.b"))?;
    h = g.relu(h);
    h = g.matmul(h, idx("fc2.w"), true)?;
    h = g.bias_row(h, idx("fc2.b"))?;
    Ok(g.sigmoid(h))
}

/// Multi-label BCE over probability and 0/1 target matrices.
fn bce_loss(g: &mut Graph, probs: NodeId, targets: &Tensor) -> Result<NodeId, EvalError> {
    let n = targets.numel();
    let y = g.leaf(targets.clone(), false);
    let ones = g.leaf(Tensor::filled(targets.shape(), 1.0), false);
    let log_p = g.log(probs, PROB_FLOOR);
    let pos = g.mul(y, log_p)?;
    let one_minus_y = g.sub(ones, y)?;
    let one_minus_p = g.sub(ones, probs)?;
    let log_1mp = g.log(one_minus_p, PROB_FLOOR);
    let neg = g.mul(one_minus_y, log_1mp)?;
    let both = g.add(pos, neg)?;
    let total = g.sum_all(both);
    Ok(g.scalar_mul(total, -1.0 / n as f64))
}

fn scores_for(clf: &ShallowClassifier, embs: &[ClipEmbedding]) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut data = Vec::with_capacity(embs.len() * clf.input_dim);
    for e in embs {
        if e.h.len() != clf.input_dim {
            return Err(EvalError::DimMismatch { got: e.h.len(), want: clf.input_dim });
        }
        data.extend(l2_normalized(&e.h));
    }
    let x = Tensor::from_vec(&[embs.len(), clf.input_dim], data)?;
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = clf.params.params.iter().map(|p| g.leaf(p.value.clone(), false)).collect();
    let xn = g.leaf(x, false);
    let probs = classifier_forward(&mut g, &clf.params, &leaves, xn)?;
    let d = g.value(probs).data();
    Ok((0..embs.len()).map(|i| d[i * clf.n_classes..(i + 1) * clf.n_classes].to_vec()).collect())
}

/// Per-class classification APs from sigmoid scores (descending ranking,
/// stable ties) and their unweighted mean.
pub fn classification_map(
    clf: &ShallowClassifier,
    test: &[ClipEmbedding],
) -> Result<(Vec<Option<f64>>, f64), EvalError> {
    let scores = scores_for(clf, test)?;
    classification_map_from_scores(&scores, test, clf.n_classes)
}

/// AP over explicit scores; descending ranking implemented as ascending
/// ranking of negated scores, which preserves stable tie order.
pub fn classification_map_from_scores(
    scores: &[Vec<f64>],
    test: &[ClipEmbedding],
    n_classes: usize,
) -> Result<(Vec<Option<f64>>, f64), EvalError> {
    let mut per_class: Vec<Option<f64>> = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let distances: Vec<f64> = scores.iter().map(|s| -s[class]).collect();
        let is_target: Vec<bool> = test
            .iter()
            .map(|e| e.labels.get(class).copied().unwrap_or(0) == 1)
            .collect();
        let n_pos = is_target.iter().filter(|&&t| t).count();
        if n_pos == 0 || n_pos == test.len() {
            per_class.push(None);
            continue;
        }
        per_class.push(Some(average_precision(&distances, &is_target)?));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(EvalError::AllClassesDegenerate);
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, map))
}

fn shallow_val_map(clf: &ShallowClassifier, val: &[ClipEmbedding]) -> Result<f64, EvalError> {
    Ok(classification_map(clf, val)?.1)
}

/// Trains the shallow classifier on frozen embeddings with Adam (lr 1e-3,
/// batch 128), early-stopping on validation mAP with patience 10; the best
/// validation checkpoint is returned. Deterministic per seed.
pub fn train_shallow(
    train: &[ClipEmbedding],
    val: &[ClipEmbedding],
    n_classes: usize,
    seed: u64,
) -> Result<ShallowClassifier, EvalError> {
    if train.len() < 2 {
        return Err(EvalError::TooFewClips { got: train.len() });
    }
    let d = train[0].h.len();
    let mut init_rng = rng_for(seed, "shallowinit", 0);
    let mut params = ParamSet::default();
    let mut push = |params: &mut ParamSet, name: &str, out: usize, fan_in: usize, shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let mut w = Tensor::from_vec(shape, data).expect("shape");
        w.round_to_f32();
        params.push(format!("{name}.w"), w);
        params.push(format!("{name}.b"), Tensor::zeros(&[out]));
    };
    push(&mut params, "fc1", SHALLOW_HIDDEN, d, &[SHALLOW_HIDDEN, d], &mut init_rng);
    push(&mut params, "fc2", n_classes, SHALLOW_HIDDEN, &[n_classes, SHALLOW_HIDDEN], &mut init_rng);
    let mut clf = ShallowClassifier { params, input_dim: d, n_classes };

    let inputs: Vec<Vec<f64>> = train.iter().map(|e| l2_normalized(&e.h)).collect();
    let targets: Vec<&[u8]> = train.iter().map(|e| e.labels.as_slice()).collect();

    let mut best = clf.clone();
    let mut best_map = shallow_val_map(&clf, val)?;
    let mut since_best = 0usize;
    for epoch in 0..SHALLOW_MAX_EPOCHS {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = rng_for(seed, "shallowepoch", epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(SHALLOW_BATCH) {
            let mut x = Vec::with_capacity(batch.len() * d);
            let mut y = Vec::with_capacity(batch.len() * n_classes);
            for &i in batch {
                x.extend_from_slice(&inputs[i]);
                y.extend(targets[i].iter().map(|&b| f64::from(b)));
            }
            let xt = Tensor::from_vec(&[batch.len(), d], x)?;
            let yt = Tensor::from_vec(&[batch.len(), n_classes], y)?;
            let mut g = Graph::new();
            let leaves: Vec<NodeId> =
                clf.params.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
            let xn = g.leaf(xt, false);
            let probs = classifier_forward(&mut g, &clf.params, &leaves, xn)?;
            let loss = bce_loss(&mut g, probs, &yt)?;
            let grads = g.backward(loss)?;
            let per_param: Vec<Option<Tensor>> = leaves.iter().map(|&l| grads[l].clone()).collect();
            clf.params.adam_step(&per_param, &AdamConfig::with_lr(SHALLOW_LR))?;
        }
        let val_map = shallow_val_map(&clf, val)?;
        if val_map > best_map {
            best_map = val_map;
            best = clf.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= SHALLOW_PATIENCE {
                break;
            }
        }
    }
    Ok(best)
}

/// Full evaluation product: retrieval and downstream classification.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub qbe_per_class: Vec<Option<f64>>,
    pub qbe_map: f64,
    pub classification_per_class: Vec<Option<f64>>,
    pub classification_map: f64,
    pub config_digest: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    /// Per-class CSV rows plus a one-line summary; byte-deterministic.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# sepclr eval report v1").unwrap();
        writeln!(out, "# config_digest={}", self.config_digest).unwrap();
        writeln!(out, "# checkpoint={}", self.checkpoint_id).unwrap();
        writeln!(out, "metric,class,value").unwrap();
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "skipped".into());
        for (c, ap) in self.qbe_per_class.iter().enumerate() {
            writeln!(out, "qbe_ap,{c},{}", fmt(ap)).unwrap();
        }
        for (c, ap) in self.classification_per_class.iter().enumerate() {
            writeln!(out, "classification_ap,{c},{}", fmt(ap)).unwrap();
        }
        writeln!(out, "qbe_map,,{:.6}", self.qbe_map).unwrap();
        writeln!(out, "classification_map,,{:.6}", self.classification_map).unwrap();
        out
    }
}

const EMB_MAGIC: &str = "sepclr-emb 1";

/// Writes embeddings: a text header "sepclr-emb 1 <d> <count>", then per
/// clip its id line followed by d little-endian f32 values.
pub fn export_embeddings(path: &Path, embs: &[ClipEmbedding], d: usize) -> Result<(), EvalError> {
    let io_err = |e: std::io::Error| EvalError::Io { path: path.display().to_string(), source: e };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{EMB_MAGIC} {d} {}", embs.len()).map_err(io_err)?;
    for e in embs {
        if e.h.len() != d {
            return Err(EvalError::DimMismatch { got: e.h.len(), want: d });
        }
        writeln!(w, "{}", e.clip_id).map_err(io_err)?;
        for &v in &e.h {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Reads an embedding export; labels are not stored in the file.
pub fn import_embeddings(path: &Path) -> Result<Vec<ClipEmbedding>, EvalError> {
    let io_err = |e: std::io::Error| EvalError::Io { path: path.display().to_string(), source: e };
    let bad = |why: &str| EvalError::BadFile { path: path.display().to_string(), why: why.to_string() };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    let mut pos = 0usize;
    let mut read_line = |bytes: &[u8], pos: &mut usize| -> Result<String, EvalError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(bad("truncated line"));
        }
        let line = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
        *pos += 1;
        Ok(line)
    };
    let header = read_line(&bytes, &mut pos)?;
    let rest = header.strip_prefix(EMB_MAGIC).ok_or_else(|| bad("bad magic"))?;
    let mut parts = rest.split_whitespace();
    let d: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing d"))?;
    let count: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing count"))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let clip_id = read_line(&bytes, &mut pos)?;
        if pos + 4 * d > bytes.len() {
            return Err(bad("truncated payload"));
        }
        let h: Vec<f64> = bytes[pos..pos + 4 * d]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        pos += 4 * d;
        out.push(ClipEmbedding { clip_id, labels: Vec::new(), h });
    }
    Ok(out)
}
