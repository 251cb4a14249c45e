use crate::data::Mask;
use crate::error::{Error, Result};
use crate::layers::SeqActivation;
use crate::tensor::{Real, Tensor};

/// Lookup table, one column per vocabulary symbol: `[d × |V|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<T: Real = f64> {
    pub weight: Tensor<T>,
}

impl<T: Real> EmbeddingParams<T> {
    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `e_t = W x_t`, i.e. the column selected by the symbol index. Masked positions are zero.
pub fn embed_forward<T: Real>(indices: &[usize], mask: &Mask, params: &EmbeddingParams<T>) -> Result<SeqActivation<T>> {
    let (d, v) = (params.dim(), params.vocab());
    let (b, s) = (mask.rows(), mask.steps());
    if indices.len() != b * s {
        return Err(Error::dim("embed_forward", &[indices.len()], &[b, s]));
    }
    let w = params.weight.data();
    let mut out = Tensor::zeros(&[b, s, d]);
    let data = out.data_mut();
    for (pos, &idx) in indices.iter().enumerate() {
        if !mask.get(pos / s, pos % s) {
            continue;
        }
        if idx >= v {
            return Err(Error::Parameter(format!(
                "symbol index {idx} outside vocabulary of {v} (encoder bug)"
            )));
        }
        let row = &mut data[pos * d..(pos + 1) * d];
        for (k, r) in row.iter_mut().enumerate() {
            *r = w[k * v + idx];
        }
    }
    Ok(SeqActivation {
        values: out,
        mask: mask.clone(),
    })
}

/// Accumulates `dL/dW` into `d_weight`.
pub fn embed_backward<T: Real>(indices: &[usize], mask: &Mask, d_out: &Tensor<T>, d_weight: &mut Tensor<T>) {
    let (d, v) = (d_weight.shape()[0], d_weight.shape()[1]);
    let s = mask.steps();
    let g = d_out.data();
    let dw = d_weight.data_mut();
    for (pos, &idx) in indices.iter().enumerate() {
        if !mask.get(pos / s, pos % s) {
            continue;
        }
        for k in 0..d {
            dw[k * v + idx] = dw[k * v + idx] + g[pos * d + k];
        }
    }
}
