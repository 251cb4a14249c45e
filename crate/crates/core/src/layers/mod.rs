//! Sequence layers below the recurrent block. Every forward pass keeps the
//! values at masked positions exactly zero.

mod conv;
mod dropout;
mod embedding;
mod pool;

pub use conv::{conv_backward, conv_forward, ConvCache, ConvParams};
pub use dropout::{dropout_backward, dropout_forward, Dropout, DropoutMask};
pub use embedding::{embed_backward, embed_forward, EmbeddingParams};
pub use pool::{conv_stack_out_length, maxpool_backward, maxpool_forward, min_input_length, PoolCache};

use crate::data::Mask;
use crate::tensor::{Real, Tensor};

/// `[batch × steps × depth]` activations with their validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqActivation<T: Real = f64> {
    pub values: Tensor<T>,
    pub mask: Mask,
}

impl<T: Real> SeqActivation<T> {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[2]
    }

    /// Feature vector at `(b, t)`.
    pub fn at(&self, b: usize, t: usize) -> &[T] {
        let (s, d) = (self.steps(), self.depth());
        let start = (b * s + t) * d;
        &self.values.data()[start..start + d]
    }
}
