//! Character-level convolution-recurrent document classifier.
//!
//! Characters are embedded, passed through a short stack of 1-D
//! convolution + max-pooling layers, read by one bidirectional LSTM layer,
//! and classified with a softmax layer over the concatenated last states.
//! All gradients are written by hand; training uses AdaDelta with global
//! norm clipping, dropout and patience-based early stopping.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod model;
pub mod optim;
pub mod recurrent;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use arch::{count_params, parse_arch, ArchConfig, ConvSpec, ParamCount};
pub use checkpoint::Checkpoint;
pub use data::{Batch, Document, Mask};
pub use error::{Error, Result};
pub use model::{ModelParams, Mode};
pub use tensor::{Rng, Tensor};
pub use trainer::{evaluate, EarlyStopState, Evaluation, TrainConfig, TrainOutcome, Trainer};
pub use vocab::Vocabulary;
