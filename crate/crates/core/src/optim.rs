//! Global-norm gradient clipping and AdaDelta.
//!
//! AdaDelta, per parameter entry with gradient `g`:
//!
//! ```text
//! E[g²]  ← ρ E[g²] + (1 − ρ) g²
//! Δx     = −(√(E[Δx²] + ε) / √(E[g²] + ε)) g
//! E[Δx²] ← ρ E[Δx²] + (1 − ρ) Δx²
//! x      ← x + Δx
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub threshold: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { threshold: 5.0 }
    }
}

/// Flattened L2 norm of a gradient collection.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Scales every entry by `min(1, threshold / ‖g‖₂)`. Returns the norm before clipping.
///
/// When no rescale is needed the tensors are left untouched.
pub fn clip_global_norm(grads: &mut [(&str, &mut Tensor)], cfg: &ClipConfig) -> Result<f64> {
    if !(cfg.threshold > 0.0) {
        return Err(Error::Parameter(format!("clip threshold must be positive, got {}", cfg.threshold)));
    }
    for (name, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name} at entry {i}")));
        }
    }
    let norm = global_norm(grads.iter().map(|(_, g)| &**g));
    if norm > cfg.threshold {
        let factor = cfg.threshold / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState {
    pub rho: f64,
    pub eps: f64,
    pub acc_grad_sq: Vec<Tensor>,
    pub acc_update_sq: Vec<Tensor>,
}

impl AdaDeltaState {
    /// Zero accumulators shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Parameter(format!("rho must lie in (0, 1), got {rho}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        let acc: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Ok(AdaDeltaState {
            rho,
            eps,
            acc_update_sq: acc.clone(),
            acc_grad_sq: acc,
        })
    }

    /// One update. `params` and `grads` must follow the order used at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.acc_grad_sq.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adadelta_step",
                &[params.len(), grads.len()],
                &[self.acc_grad_sq.len()],
            ));
        }
        let (rho, eps) = (self.rho, self.eps);
        for (((x, g), eg), ed) in params
            .iter_mut()
            .zip(grads)
            .zip(self.acc_grad_sq.iter_mut())
            .zip(self.acc_update_sq.iter_mut())
        {
            if x.shape() != g.shape() || x.shape() != eg.shape() || x.shape() != ed.shape() {
                return Err(Error::dim("adadelta_step", x.shape(), eg.shape()));
            }
            for (((xv, &gv), egv), edv) in x
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(eg.data_mut())
                .zip(ed.data_mut())
            {
                *egv = rho * *egv + (1.0 - rho) * gv * gv;
                let dx = -((*edv + eps).sqrt() / (*egv + eps).sqrt()) * gv;
                *edv = rho * *edv + (1.0 - rho) * dx * dx;
                *xv += dx;
            }
        }
        Ok(())
    }
}
