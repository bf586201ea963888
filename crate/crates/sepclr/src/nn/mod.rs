//! Dense tensor math with reverse-mode differentiation and Adam.

mod adam;
mod gemm;
mod graph;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;

pub use adam::{AdamConfig, Param, ParamSet};
pub use gemm::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {ctx}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { ctx: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("expected scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("zero vector in {ctx}")]
    ZeroVector { ctx: &'static str },
    #[error("checkpoint i/o failed for {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid checkpoint {path}: {why}")]
    BadCheckpoint { path: String, why: String },
}
