//! Softmax classifier, regularized negative log-likelihood, argmax prediction.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T: Real = f64> {
    /// `[K × 2h]`
    pub weight: Tensor<T>,
    /// `[K]`
    pub bias: Tensor<T>,
}

impl<T: Real> ClassifierParams<T> {
    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierParams {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 5e-4 }
    }
}

/// `[B × K]` logits, `x Wᵀ + b`.
pub fn logits<T: Real>(x: &Tensor<T>, params: &ClassifierParams<T>) -> Result<Tensor<T>> {
    let mut z = x.matmul_nt(&params.weight)?;
    let k = params.classes();
    if params.bias.len() != k {
        return Err(Error::dim("classifier bias", params.bias.shape(), &[k]));
    }
    for row in z.data_mut().chunks_mut(k) {
        for (v, &b) in row.iter_mut().zip(params.bias.data()) {
            *v = *v + b;
        }
    }
    Ok(z)
}

/// Row-wise log-softmax with the row max subtracted first.
pub fn log_softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Ok(out)
}

pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
        let z: T = row.iter().copied().sum();
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

pub fn softmax_forward<T: Real>(x: &Tensor<T>, params: &ClassifierParams<T>) -> Result<Tensor<T>> {
    softmax(&logits(x, params)?)
}

/// Per-example `-log p(y|x)` from log-probabilities.
pub fn nll<T: Real>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let k = log_probs.shape()[1];
    if labels.len() != log_probs.shape()[0] {
        return Err(Error::dim("nll", log_probs.shape(), &[labels.len()]));
    }
    labels
        .iter()
        .zip(log_probs.data().chunks(k))
        .map(|(&y, row)| {
            if y >= k {
                Err(Error::Parameter(format!("label {y} outside 0..{k}")))
            } else {
                Ok(-row[y])
            }
        })
        .collect()
}

/// `(λ/2) Σ w²` over the given tensors.
pub fn weight_decay<'a, T: Real>(decayed: impl IntoIterator<Item = &'a Tensor<T>>, lambda: f64) -> T {
    let sq: T = decayed.into_iter().map(|t| t.sum_sq()).sum();
    T::of(lambda / 2.0) * sq
}

/// Summed NLL plus weight decay; also returns the per-example NLL.
pub fn loss<'a, T: Real>(
    log_probs: &Tensor<T>,
    labels: &[usize],
    decayed: impl IntoIterator<Item = &'a Tensor<T>>,
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    if cfg.lambda < 0.0 {
        return Err(Error::Parameter(format!("weight decay must be non-negative, got {}", cfg.lambda)));
    }
    let per = nll(log_probs, labels)?;
    let total = per.iter().copied().sum::<T>() + weight_decay(decayed, cfg.lambda);
    Ok((total, per))
}

/// `d(Σ nll)/d logits = softmax − onehot(y)`.
pub fn nll_logits_grad<T: Real>(log_probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let k = log_probs.shape()[1];
    let mut g = log_probs.map(|v| v.exp());
    for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
        row[y] = row[y] - T::one();
    }
    g
}

/// Argmax per row, lowest index on ties.
pub fn predict<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Accumulates classifier gradients; returns `dL/dx`.
pub fn classifier_backward<T: Real>(
    x: &Tensor<T>,
    params: &ClassifierParams<T>,
    d_logits: &Tensor<T>,
    grads: &mut ClassifierParams<T>,
) -> Result<Tensor<T>> {
    grads.weight.add_assign(&d_logits.matmul_tn(x)?)?;
    let k = params.classes();
    for row in d_logits.data().chunks(k) {
        for (acc, &v) in grads.bias.data_mut().iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    d_logits.matmul(&params.weight)
}
