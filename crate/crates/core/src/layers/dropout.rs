use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};

/// Inverted dropout: at training time units are kept with probability `1 - p`
/// and scaled by `1 / (1 - p)`; inference is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub training: bool,
}

/// Per-entry multiplier used by the last forward pass (0 or `1/(1-p)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Real = f64> {
    pub scale: Tensor<T>,
}

impl Dropout {
    pub fn new(p: f64, training: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p must lie in [0, 1), got {p}")));
        }
        Ok(Dropout { p, training })
    }

    pub fn active(&self) -> bool {
        self.training && self.p > 0.0
    }
}

/// Row `i` of `x` (first axis) draws its mask from `rngs[i]`, so each example's
/// mask does not depend on which other examples share the batch.
pub fn dropout_forward<T: Real>(
    x: &Tensor<T>,
    state: &Dropout,
    rngs: &mut [Rng],
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    if !state.active() {
        return Ok((x.clone(), None));
    }
    let rows = x.rows();
    if rngs.len() != rows {
        return Err(Error::dim("dropout_forward", x.shape(), &[rngs.len()]));
    }
    let row_len = x.row_len();
    let keep = 1.0 - state.p;
    let kept = T::of(1.0 / keep);
    let mut scale = x.zeros_like();
    for (row, rng) in scale.data_mut().chunks_mut(row_len).zip(rngs.iter_mut()) {
        for s in row {
            if rng.uniform() < keep {
                *s = kept;
            }
        }
    }
    let out = x.mul(&scale)?;
    Ok((out, Some(DropoutMask { scale })))
}

pub fn dropout_backward<T: Real>(d_out: &Tensor<T>, mask: Option<&DropoutMask<T>>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(d_out.clone()),
        Some(m) => d_out.mul(&m.scale),
    }
}
