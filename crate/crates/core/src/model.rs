//! The full network: embedding → conv/pool stack → dropout → BiLSTM →
//! last-state readout → dropout → softmax classifier.

use crate::arch::ArchConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::head::{classifier_backward, log_softmax, logits, nll_logits_grad, ClassifierParams};
use crate::layers::{
    conv_backward, conv_forward, dropout_backward, dropout_forward, embed_backward, embed_forward, maxpool_backward,
    maxpool_forward, ConvCache, ConvParams, Dropout, DropoutMask, EmbeddingParams, PoolCache, SeqActivation,
};
use crate::recurrent::{
    bilstm_backward, bilstm_forward, last_state_readout, last_state_readout_backward, BiLstmCache, BiLstmParams,
    LstmParams, LSTM_TENSOR_NAMES,
};
use crate::tensor::{sample_uniform, Real, Rng, Tensor};

pub const INIT_SCHEME: &str = "uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, forget bias 1.0";

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f64> {
    pub embedding: EmbeddingParams<T>,
    pub convs: Vec<ConvParams<T>>,
    pub lstm: BiLstmParams<T>,
    pub classifier: ClassifierParams<T>,
}

/// A named parameter tensor and whether weight decay applies to it.
pub struct NamedTensor<'a, T: Real> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    pub decayed: bool,
}

fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    sample_uniform(rng, shape, -a, a)
}

impl ModelParams<f64> {
    pub fn init(cfg: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        p.embedding.weight = glorot(rng, &[cfg.embed_dim, cfg.vocab_size], cfg.vocab_size, cfg.embed_dim)?;
        let mut d_in = cfg.embed_dim;
        for (layer, spec) in p.convs.iter_mut().zip(&cfg.conv) {
            let fan_in = spec.receptive * d_in;
            layer.filter = glorot(rng, &[spec.filters, fan_in], fan_in, spec.filters)?;
            d_in = spec.filters;
        }
        let h = cfg.recurrent_width;
        for dir in [&mut p.lstm.forward, &mut p.lstm.reverse] {
            for w in [&mut dir.w_i, &mut dir.w_o, &mut dir.w_f, &mut dir.w_c] {
                *w = glorot(rng, &[h, d_in], d_in, h)?;
            }
            for u in [&mut dir.u_i, &mut dir.u_o, &mut dir.u_f, &mut dir.u_c] {
                *u = glorot(rng, &[h, h], h, h)?;
            }
            dir.b_f = Tensor::full(&[h], 1.0);
        }
        p.classifier.weight = glorot(rng, &[cfg.classes, 2 * h], 2 * h, cfg.classes)?;
        Ok(p)
    }
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(cfg: &ArchConfig) -> Self {
        let mut d_in = cfg.embed_dim;
        let convs = cfg
            .conv
            .iter()
            .map(|spec| {
                let c = ConvParams {
                    filter: Tensor::zeros(&[spec.filters, spec.receptive * d_in]),
                    bias: Tensor::zeros(&[spec.filters]),
                    receptive: spec.receptive,
                    pool: spec.pool,
                };
                d_in = spec.filters;
                c
            })
            .collect();
        let h = cfg.recurrent_width;
        ModelParams {
            embedding: EmbeddingParams {
                weight: Tensor::zeros(&[cfg.embed_dim, cfg.vocab_size]),
            },
            convs,
            lstm: BiLstmParams {
                forward: LstmParams::zeros(d_in, h),
                reverse: LstmParams::zeros(d_in, h),
            },
            classifier: ClassifierParams {
                weight: Tensor::zeros(&[cfg.classes, 2 * h]),
                bias: Tensor::zeros(&[cfg.classes]),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embedding: EmbeddingParams {
                weight: self.embedding.weight.zeros_like(),
            },
            convs: self.convs.iter().map(ConvParams::zeros_like).collect(),
            lstm: self.lstm.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Canonical order shared by checkpoints, the optimizer and gradient reports.
    pub fn named(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = vec![NamedTensor {
            name: "embedding.weight".into(),
            tensor: &self.embedding.weight,
            decayed: true,
        }];
        for (i, c) in self.convs.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("conv{i}.filter"),
                tensor: &c.filter,
                decayed: true,
            });
            out.push(NamedTensor {
                name: format!("conv{i}.bias"),
                tensor: &c.bias,
                decayed: false,
            });
        }
        for (dir, p) in [("forward", &self.lstm.forward), ("reverse", &self.lstm.reverse)] {
            for (name, t) in LSTM_TENSOR_NAMES.iter().zip(p.tensors()) {
                out.push(NamedTensor {
                    name: format!("lstm.{dir}.{name}"),
                    tensor: t,
                    decayed: !name.starts_with('b'),
                });
            }
        }
        out.push(NamedTensor {
            name: "classifier.weight".into(),
            tensor: &self.classifier.weight,
            decayed: true,
        });
        out.push(NamedTensor {
            name: "classifier.bias".into(),
            tensor: &self.classifier.bias,
            decayed: false,
        });
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|n| n.tensor).collect()
    }

    /// Mutable tensors in [`ModelParams::named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding.weight];
        for c in self.convs.iter_mut() {
            out.push(&mut c.filter);
            out.push(&mut c.bias);
        }
        out.extend(self.lstm.forward.tensors_mut());
        out.extend(self.lstm.reverse.tensors_mut());
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn decayed(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().filter(|n| n.decayed).map(|n| n.tensor).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|n| n.name).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams<T>) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let lstm = |p: &LstmParams<T>| LstmParams {
            w_i: p.w_i.cast(),
            w_o: p.w_o.cast(),
            w_f: p.w_f.cast(),
            w_c: p.w_c.cast(),
            u_i: p.u_i.cast(),
            u_o: p.u_o.cast(),
            u_f: p.u_f.cast(),
            u_c: p.u_c.cast(),
            b_i: p.b_i.cast(),
            b_o: p.b_o.cast(),
            b_f: p.b_f.cast(),
            b_c: p.b_c.cast(),
        };
        ModelParams {
            embedding: EmbeddingParams {
                weight: self.embedding.weight.cast(),
            },
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    filter: c.filter.cast(),
                    bias: c.bias.cast(),
                    receptive: c.receptive,
                    pool: c.pool,
                })
                .collect(),
            lstm: BiLstmParams {
                forward: lstm(&self.lstm.forward),
                reverse: lstm(&self.lstm.reverse),
            },
            classifier: ClassifierParams {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
        }
    }
}

/// Inference, or training with dropout driven by `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Each example draws its dropout masks from sub-streams of `seed` keyed by
    /// its id in the batch, so masks do not depend on batch composition.
    Train { seed: u64, dropout: f64 },
}

struct ConvStage<T: Real> {
    input: SeqActivation<T>,
    conv: ConvCache<T>,
    pool: PoolCache,
}

/// Result of a forward pass together with everything backward needs.
pub struct Forward<T: Real = f64> {
    pub log_probs: Tensor<T>,
    indices: Vec<usize>,
    stages: Vec<ConvStage<T>>,
    drop_seq: Option<DropoutMask<T>>,
    rec_input: SeqActivation<T>,
    lstm: BiLstmCache<T>,
    readout: Tensor<T>,
    drop_readout: Option<DropoutMask<T>>,
}

impl<T: Real> Forward<T> {
    pub fn probs(&self) -> Tensor<T> {
        self.log_probs.map(|v| v.exp())
    }

    /// Per-example `[h_fwd(last) ; h_rev(first)]` before dropout.
    pub fn readout(&self) -> &Tensor<T> {
        &self.readout
    }

    /// Mask handed to the recurrent layer.
    pub fn recurrent_mask(&self) -> &crate::data::Mask {
        &self.rec_input.mask
    }
}

fn dropout_rngs(seed: u64, ids: &[usize], site: u64) -> Vec<Rng> {
    ids.iter().map(|&id| Rng::with_stream(seed, (id as u64) * 2 + site)).collect()
}

pub fn forward<T: Real>(params: &ModelParams<T>, batch: &Batch, mode: Mode) -> Result<Forward<T>> {
    let (seed, drop) = match mode {
        Mode::Eval => (0, Dropout::new(0.0, false)?),
        Mode::Train { seed, dropout } => (seed, Dropout::new(dropout, true)?),
    };
    let mut x = embed_forward(&batch.indices, &batch.mask, &params.embedding)?;
    let mut stages = Vec::with_capacity(params.convs.len());
    for conv in &params.convs {
        let (c_out, c_cache) = conv_forward(&x, conv)?;
        let (p_out, p_cache) = maxpool_forward(&c_out, conv.pool)?;
        stages.push(ConvStage {
            input: x,
            conv: c_cache,
            pool: p_cache,
        });
        x = p_out;
    }
    let (dropped, drop_seq) = dropout_forward(&x.values, &drop, &mut dropout_rngs(seed, &batch.ids, 0))?;
    let rec_input = SeqActivation {
        values: dropped,
        mask: x.mask,
    };
    let (h_fwd, h_rev, lstm) = bilstm_forward(&rec_input, &params.lstm)?;
    let readout = last_state_readout(&h_fwd, &h_rev, &rec_input.mask)?;
    let (ro, drop_readout) = dropout_forward(&readout, &drop, &mut dropout_rngs(seed, &batch.ids, 1))?;
    let z = logits(&ro, &params.classifier)?;
    let log_probs = log_softmax(&z)?;
    Ok(Forward {
        log_probs,
        indices: batch.indices.clone(),
        stages,
        drop_seq,
        rec_input,
        lstm,
        readout: ro,
        drop_readout,
    })
}

/// Gradients of the summed NLL (no weight decay) with respect to every parameter.
pub fn backward<T: Real>(params: &ModelParams<T>, fwd: &Forward<T>, labels: &[usize]) -> Result<ModelParams<T>> {
    if labels.len() != fwd.log_probs.shape()[0] {
        return Err(Error::dim("backward", fwd.log_probs.shape(), &[labels.len()]));
    }
    let mut grads = params.zeros_like();
    let d_logits = nll_logits_grad(&fwd.log_probs, labels);
    let d_ro = classifier_backward(&fwd.readout, &params.classifier, &d_logits, &mut grads.classifier)?;
    let d_readout = dropout_backward(&d_ro, fwd.drop_readout.as_ref())?;
    let (d_fwd, d_rev) = last_state_readout_backward(&d_readout, &fwd.rec_input.mask, params.lstm.hidden())?;
    let d_rec = bilstm_backward(&fwd.rec_input, &params.lstm, &fwd.lstm, &d_fwd, &d_rev, &mut grads.lstm)?;
    let mut d = dropout_backward(&d_rec, fwd.drop_seq.as_ref())?;
    for (i, stage) in fwd.stages.iter().enumerate().rev() {
        let d_conv = maxpool_backward(&stage.pool, &d);
        d = conv_backward(&stage.input, &params.convs[i], &stage.conv, &d_conv, &mut grads.convs[i])?;
    }
    let first = fwd.stages.first().map(|s| &s.input.mask).ok_or_else(|| Error::Config("no conv layers".into()))?;
    embed_backward(&fwd.indices, first, &d, &mut grads.embedding.weight);
    Ok(grads)
}

/// Probabilities for every example in `batch`, dropout off.
pub fn predict_probs<T: Real>(params: &ModelParams<T>, batch: &Batch) -> Result<Tensor<T>> {
    Ok(forward(params, batch, Mode::Eval)?.probs())
}
