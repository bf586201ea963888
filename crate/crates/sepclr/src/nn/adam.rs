//! Named parameter storage and the Adam optimizer.

use super::tensor::Tensor;
use super::NnError;

/// Adam hyperparameters. Defaults: beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One named parameter with its first/second moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self { name: name.into(), value, m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) }
    }
}

/// Ordered collection of parameters plus the shared optimizer step count.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
    pub step: u64,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Param::new(name, value));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Indices of parameters whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].name.starts_with(prefix)).collect()
    }

    /// One bias-corrected Adam update. `grads[i]` is the gradient for
    /// parameter i; None leaves that parameter (and its moments) untouched.
    ///
    /// The step counter advances once per call. Updated values and moments
    /// are rounded to f32 resolution so that the 32-bit checkpoint format
    /// round-trips the training state exactly.
    pub fn adam_step(&mut self, grads: &[Option<Tensor>], cfg: &AdamConfig) -> Result<(), NnError> {
        if grads.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                ctx: "adam_step grads count",
                lhs: vec![self.params.len()],
                rhs: vec![grads.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != p.value.shape() {
                return Err(NnError::ShapeMismatch {
                    ctx: "adam_step grad shape",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let pv = p.value.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            let gd = g.data();
            for i in 0..pv.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pv[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            p.value.round_to_f32();
            p.m.round_to_f32();
            p.v.round_to_f32();
        }
        Ok(())
    }
}
