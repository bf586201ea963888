//! Contrastive objectives: the NT-Xent similarity loss, the class-balanced
//! coincidence cross-entropy, and their equally-weighted sum.
//!
//! Each loss has one canonical implementation as a graph composite (used by
//! training); the plain-value functions below wrap it. Test oracles are
//! independent transcriptions living in test code.

use thiserror::Error;

use crate::model::{coin_head_pair_grid, insert_param_leaves, ModelState};
use crate::nn::{Graph, NnError, NodeId, Tensor};

/// Probability floor inside logs; keeps saturated heads finite.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperature {got} outside (0, 1]")]
    BadTemperature { got: f64 },
    #[error("batch of {got} too small; need at least {want}")]
    BatchTooSmall { got: usize, want: usize },
    #[error("embedding dims disagree: {lhs} vs {rhs}")]
    DimMismatch { lhs: usize, rhs: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("graph op failed: {0}")]
    Nn(#[from] NnError),
    #[error("model failed: {0}")]
    Model(#[from] crate::model::ModelError),
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, LossError> {
    if u.len() != v.len() {
        return Err(LossError::DimMismatch { lhs: u.len(), rhs: v.len() });
    }
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(LossError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// A similarity batch: 2N metric embeddings ordered as N (mixture-view,
/// channel-view) pairs, so the positive of row i is row i^1.
#[derive(Debug, Clone)]
pub struct SimilarityBatch {
    pub z: Vec<Vec<f64>>,
    pub tau: f64,
}

impl SimilarityBatch {
    pub fn n_pairs(&self) -> usize {
        self.z.len() / 2
    }
}

/// NT-Xent as a graph composite over a [2N, dz] embedding node. For every
/// anchor i with partner j: log sum_{v != i} exp(sim(z_i,z_v)/tau) minus
/// sim(z_i,z_j)/tau, averaged over all 2N anchors. The positive stays in
/// the denominator; only v = i is excluded.
pub fn nt_xent_node(g: &mut Graph, z: NodeId, tau: f64) -> Result<NodeId, LossError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LossError::BadTemperature { got: tau });
    }
    let rows = g.value(z).shape()[0];
    if rows < 2 || rows % 2 != 0 {
        return Err(LossError::BatchTooSmall { got: rows, want: 2 });
    }
    let zn = g.l2_normalize_rows(z)?;
    let sims = g.matmul(zn, zn, true)?;
    let scaled = g.scalar_mul(sims, 1.0 / tau);
    let exps = g.exp(scaled);
    // zero the diagonal: v = i is excluded from the denominator
    let mut mask = Tensor::filled(&[rows, rows], 1.0);
    for i in 0..rows {
        mask.data_mut()[i * rows + i] = 0.0;
    }
    let mask = g.leaf(mask, false);
    let masked = g.mul(exps, mask)?;
    let denom = g.row_sum(masked)?;
    let log_denom = g.log(denom, 0.0);
    let partner_idx: Vec<usize> = (0..rows).map(|i| i * rows + (i ^ 1)).collect();
    let pos = g.select_entries(scaled, partner_idx)?;
    let per_anchor = g.sub(log_denom, pos)?;
    let total = g.sum_all(per_anchor);
    Ok(g.scalar_mul(total, 1.0 / rows as f64))
}

/// NT-Xent on plain embeddings.
pub fn nt_xent(batch: &SimilarityBatch) -> Result<f64, LossError> {
    let rows = batch.z.len();
    if rows < 2 || rows % 2 != 0 {
        return Err(LossError::BatchTooSmall { got: rows, want: 2 });
    }
    let dz = batch.z[0].len();
    for row in &batch.z {
        if row.len() != dz {
            return Err(LossError::DimMismatch { lhs: dz, rhs: row.len() });
        }
    }
    let mut data = Vec::with_capacity(rows * dz);
    for row in &batch.z {
        data.extend_from_slice(row);
    }
    let mut g = Graph::new();
    let z = g.leaf(Tensor::from_vec(&[rows, dz], data)?, false);
    let loss = nt_xent_node(&mut g, z, batch.tau)?;
    Ok(g.value(loss).item()?)
}

/// N coinciding embedding pairs (views 1 and 2 of the same clips).
#[derive(Debug, Clone)]
pub struct CoincidenceBatch {
    pub h_a: Vec<Vec<f64>>,
    pub h_b: Vec<Vec<f64>>,
}

/// Class-balanced coincidence cross-entropy over an [N*N] probability node
/// laid out row-major over (i, j) pairs: the N diagonal entries are the
/// coinciding positives, the N(N-1) off-diagonal entries the negatives.
pub fn coincidence_loss_node(g: &mut Graph, probs: NodeId, n: usize) -> Result<NodeId, LossError> {
    if n < 2 {
        return Err(LossError::BatchTooSmall { got: n, want: 2 });
    }
    let numel = g.value(probs).numel();
    if numel != n * n {
        return Err(LossError::DimMismatch { lhs: numel, rhs: n * n });
    }
    let log_p = g.log(probs, PROB_FLOOR);
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let pos = g.select_entries(log_p, diag)?;
    let pos_sum = g.sum_all(pos);
    let pos_term = g.scalar_mul(pos_sum, -1.0 / n as f64);

    let ones = g.leaf(Tensor::filled(&[n * n], 1.0), false);
    let one_minus = g.sub(ones, probs)?;
    let log_1m = g.log(one_minus, PROB_FLOOR);
    let mut mask = Tensor::filled(&[n * n], 1.0);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = g.leaf(mask, false);
    let neg_masked = g.mul(log_1m, mask)?;
    let neg_sum = g.sum_all(neg_masked);
    let neg_term = g.scalar_mul(neg_sum, -1.0 / (n * (n - 1)) as f64);

    Ok(g.add(pos_term, neg_term)?)
}

/// Coincidence loss from a row-major N x N probability table.
pub fn coincidence_loss_from_probs(probs: &[f64], n: usize) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::from_vec(&[n * n], probs.to_vec())?, false);
    let loss = coincidence_loss_node(&mut g, p, n)?;
    Ok(g.value(loss).item()?)
}

/// Coincidence loss of an embedding batch under the model's head.
pub fn coincidence_loss(batch: &CoincidenceBatch, state: &ModelState) -> Result<f64, LossError> {
    let n = batch.h_a.len();
    if n < 2 || batch.h_b.len() != n {
        return Err(LossError::BatchTooSmall { got: n.min(batch.h_b.len()), want: 2 });
    }
    let d = state.embed_dim();
    let mut flat_a = Vec::with_capacity(n * d);
    let mut flat_b = Vec::with_capacity(n * d);
    for (a, b) in batch.h_a.iter().zip(&batch.h_b) {
        if a.len() != d || b.len() != d {
            return Err(LossError::DimMismatch { lhs: a.len(), rhs: d });
        }
        flat_a.extend_from_slice(a);
        flat_b.extend_from_slice(b);
    }
    let mut g = Graph::new();
    let leaves = insert_param_leaves(&mut g, state, &[]);
    let ha = g.leaf(Tensor::from_vec(&[n, d], flat_a)?, false);
    let hb = g.leaf(Tensor::from_vec(&[n, d], flat_b)?, false);
    let probs = coin_head_pair_grid(&mut g, state, &leaves, ha, hb)?;
    let loss = coincidence_loss_node(&mut g, probs, n)?;
    Ok(g.value(loss).item()?)
}

/// Equally weighted joint objective.
pub fn joint_loss(l_sim: f64, l_coin: f64) -> f64 {
    l_sim + l_coin
}
