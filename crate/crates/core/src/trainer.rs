//! Epoch loop, validation, patience-based early stopping and evaluation.
//!
//! Every random choice is a pure function of `(seed, epoch)`: the shuffle of
//! epoch `e` uses stream `2e` and its dropout seed comes from stream `2e + 1`.
//! Batches are split into fixed-size chunks that run on the rayon pool and are
//! reduced in chunk order, so results do not depend on the thread count and a
//! resumed run continues exactly where the interrupted one would have.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{make_batches, Batch, Document, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::head::{nll, predict};
use crate::layers::min_input_length;
use crate::model::{backward, forward, ModelParams, Mode};
use crate::optim::{clip_global_norm, AdaDeltaState, ClipConfig};
use crate::tensor::Rng;
use crate::vocab::Vocabulary;

/// Examples per parallel work item. Fixed so the reduction order never changes.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lambda: f64,
    pub rho: f64,
    pub eps: f64,
    pub clip: f64,
    pub initial_patience: usize,
    /// Relative validation-loss improvement needed to extend patience.
    pub improvement: f64,
    pub max_epochs: Option<usize>,
    pub seed: u64,
    /// Truncation length applied when documents were encoded; inference reuses it.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lambda: 5e-4,
            rho: 0.95,
            eps: 1e-5,
            clip: 5.0,
            initial_patience: 10,
            improvement: 0.005,
            max_epochs: None,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip threshold must be positive, got {}", self.clip));
        }
        if !(0.0..1.0).contains(&self.improvement) {
            return bad(format!("improvement threshold must lie in [0, 1), got {}", self.improvement));
        }
        if self.max_len == 0 {
            return bad("max length must be at least 1".into());
        }
        if self.max_epochs == Some(0) {
            return bad("max epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Patience bookkeeping. `best_val_loss` is the reference the next epoch has
/// to beat by the relative threshold; it only moves when patience is extended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub patience: usize,
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub improvement: f64,
}

impl EarlyStopState {
    pub fn new(initial_patience: usize, improvement: f64) -> Self {
        EarlyStopState {
            patience: initial_patience,
            best_val_loss: None,
            best_epoch: 0,
            improvement,
        }
    }

    /// Records epoch `epoch`'s validation loss. Returns true when patience grew.
    /// The first observation only sets the reference.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        match self.best_val_loss {
            None => {
                self.best_val_loss = Some(val_loss);
                self.best_epoch = epoch;
                false
            }
            Some(best) if val_loss < best * (1.0 - self.improvement) => {
                self.best_val_loss = Some(val_loss);
                self.best_epoch = epoch;
                self.patience += 2;
                true
            }
            Some(_) => false,
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch > self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-document training NLL, dropout on.
    pub train_loss: f64,
    /// Mean per-document validation NLL, dropout off.
    pub val_loss: f64,
    pub val_error: f64,
    pub patience: usize,
}

impl EpochMetrics {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\tval_loss\tval_error\tpatience";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.train_loss, self.val_loss, self.val_error, self.patience
        )
    }
}

pub fn metrics_tsv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(EpochMetrics::TSV_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&m.tsv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged { epoch: usize, message: String },
}

pub struct TrainOutcome {
    /// Lowest validation error seen (ties go to the lower validation loss).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub stop: StopReason,
    pub skipped_train: usize,
    pub skipped_val: usize,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochMetrics] {
        &self.last.meta.history
    }
}

/// Handed to the per-epoch callback after each completed epoch.
pub struct EpochEvent<'a> {
    pub metrics: &'a EpochMetrics,
    pub last: &'a Checkpoint,
    pub best: &'a Checkpoint,
    pub new_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    /// Mean per-document NLL.
    pub loss: f64,
    pub error_rate: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Splits off documents too short to survive the pooling stack.
pub fn filter_short(docs: &[Document], arch: &ArchConfig, what: &str) -> (Vec<Document>, usize) {
    let min = min_input_length(&arch.pools());
    let kept: Vec<Document> = docs.iter().filter(|d| d.len() >= min).cloned().collect();
    let skipped = docs.len() - kept.len();
    if skipped > 0 {
        warn!("{what}: skipping {skipped} document(s) shorter than {min} characters");
    }
    (kept, skipped)
}

/// Batch trimmed to its own longest row.
fn trimmed(batch: &Batch) -> Batch {
    let steps = batch.lengths.iter().copied().max().unwrap_or(1).max(1);
    if steps == batch.steps() {
        return batch.clone();
    }
    let old = batch.steps();
    let mut indices = Vec::with_capacity(batch.size() * steps);
    for row in batch.indices.chunks(old) {
        indices.extend_from_slice(&row[..steps]);
    }
    Batch {
        indices,
        lengths: batch.lengths.clone(),
        mask: crate::data::Mask::from_lengths(&batch.lengths, steps),
        labels: batch.labels.clone(),
        ids: batch.ids.clone(),
    }
}

fn chunks(batch: &Batch) -> Vec<Batch> {
    (0..batch.size())
        .step_by(CHUNK)
        .map(|s| trimmed(&batch.slice(s, (s + CHUNK).min(batch.size()))))
        .collect()
}

/// Summed NLL and its gradient over one batch, dropout on.
fn batch_gradient(params: &ModelParams, batch: &Batch, mode: Mode) -> Result<(f64, ModelParams)> {
    let parts: Vec<Result<(f64, ModelParams)>> = chunks(batch)
        .par_iter()
        .map(|c| {
            let fwd = forward(params, c, mode)?;
            let loss: f64 = nll(&fwd.log_probs, &c.labels)?.iter().sum();
            let grads = backward(params, &fwd, &c.labels)?;
            Ok((loss, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Option<ModelParams> = None;
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g)?,
        }
    }
    let grads = grads.ok_or_else(|| Error::Parameter("empty batch".into()))?;
    Ok((total, grads))
}

/// Forward-only pass over `docs` with dropout off. Documents must already be long enough.
fn eval_docs(params: &ModelParams, docs: &[Document], batch_size: usize) -> Result<(f64, Vec<usize>)> {
    let mut rng = Rng::new(0);
    let batches = make_batches(docs, batch_size, &mut rng, false)?;
    let work: Vec<Batch> = batches.iter().flat_map(chunks).collect();
    let parts: Vec<Result<(f64, Vec<usize>)>> = work
        .par_iter()
        .map(|c| {
            let fwd = forward(params, c, Mode::Eval)?;
            let loss: f64 = nll(&fwd.log_probs, &c.labels)?.iter().sum();
            Ok((loss, predict(&fwd.log_probs)))
        })
        .collect();
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(docs.len());
    for part in parts {
        let (l, p) = part?;
        loss += l;
        preds.extend(p);
    }
    Ok((loss, preds))
}

pub fn evaluate(params: &ModelParams, arch: &ArchConfig, docs: &[Document]) -> Result<Evaluation> {
    if docs.is_empty() {
        return Err(Error::Parameter("cannot evaluate an empty document set".into()));
    }
    let (kept, skipped) = filter_short(docs, arch, "evaluate");
    if kept.is_empty() {
        return Err(Error::Parameter(format!(
            "all {skipped} documents are shorter than {} characters",
            min_input_length(&arch.pools())
        )));
    }
    let k = arch.classes;
    if let Some(d) = kept.iter().find(|d| d.label >= k) {
        return Err(Error::Parameter(format!("label {} outside 0..{k}", d.label)));
    }
    let (loss, preds) = eval_docs(params, &kept, 128)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut wrong = 0;
    for (d, &p) in kept.iter().zip(&preds) {
        confusion[d.label][p] += 1;
        wrong += usize::from(d.label != p);
    }
    Ok(Evaluation {
        loss: loss / kept.len() as f64,
        error_rate: wrong as f64 / kept.len() as f64,
        confusion,
        evaluated: kept.len(),
        skipped,
    })
}

/// Dropout seed for epoch `epoch` (1-based).
fn dropout_seed(seed: u64, epoch: usize) -> u64 {
    Rng::with_stream(seed, 2 * epoch as u64 + 1).next_u64()
}

/// One optimizer step: decay gradient, clipping, AdaDelta. Returns the summed batch NLL.
fn step(
    params: &mut ModelParams,
    opt: &mut AdaDeltaState,
    batch: &Batch,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradient(params, batch, mode)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let names = params.names();
    let decayed: Vec<bool> = params.named().iter().map(|n| n.decayed).collect();
    for ((g, w), &d) in grads.tensors_mut().into_iter().zip(params.tensors()).zip(&decayed) {
        if d && cfg.lambda > 0.0 {
            for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                *gv += cfg.lambda * wv;
            }
        }
    }
    {
        let mut named: Vec<(&str, &mut crate::tensor::Tensor)> =
            names.iter().map(String::as_str).zip(grads.tensors_mut()).collect();
        clip_global_norm(&mut named, &ClipConfig { threshold: cfg.clip })?;
    }
    let g = grads.tensors();
    opt.step(&mut params.tensors_mut(), &g)?;
    if let Some(n) = params.named().iter().find(|n| !n.tensor.all_finite()) {
        return Err(Error::Numeric(format!("non-finite parameter in {} after update", n.name)));
    }
    Ok(loss)
}

/// Everything needed to continue a run.
struct RunState {
    params: ModelParams,
    opt: AdaDeltaState,
    early: EarlyStopState,
    history: Vec<EpochMetrics>,
    epoch: usize,
    best: Option<Checkpoint>,
}

pub struct Trainer<'a> {
    pub arch: &'a ArchConfig,
    pub cfg: &'a TrainConfig,
    pub vocab: &'a Vocabulary,
}

impl<'a> Trainer<'a> {
    pub fn new(arch: &'a ArchConfig, cfg: &'a TrainConfig, vocab: &'a Vocabulary) -> Self {
        Trainer { arch, cfg, vocab }
    }

    fn checkpoint(&self, s: &RunState, params: &ModelParams, opt: &AdaDeltaState) -> Checkpoint {
        Checkpoint {
            arch: self.arch.clone(),
            vocab: self.vocab.clone(),
            params: params.clone(),
            optimizer: opt.clone(),
            meta: CheckpointMeta::new(self.cfg.clone(), s.epoch, s.early.clone(), s.history.clone()),
        }
    }

    pub fn train(&self, train: &[Document], val: &[Document]) -> Result<TrainOutcome> {
        self.train_with(train, val, |_| Ok(()))
    }

    pub fn train_with(
        &self,
        train: &[Document],
        val: &[Document],
        on_epoch: impl FnMut(&EpochEvent) -> Result<()>,
    ) -> Result<TrainOutcome> {
        self.arch.validate()?;
        self.cfg.validate()?;
        let params = ModelParams::init(self.arch, &mut Rng::new(self.cfg.seed))?;
        let opt = AdaDeltaState::new(params.tensors(), self.cfg.rho, self.cfg.eps)?;
        let state = RunState {
            params,
            opt,
            early: EarlyStopState::new(self.cfg.initial_patience, self.cfg.improvement),
            history: Vec::new(),
            epoch: 0,
            best: None,
        };
        self.run(state, train, val, on_epoch)
    }

    /// Continues from `last`; `best` is the best checkpoint written so far, if any.
    pub fn resume(
        &self,
        last: Checkpoint,
        best: Option<Checkpoint>,
        train: &[Document],
        val: &[Document],
        on_epoch: impl FnMut(&EpochEvent) -> Result<()>,
    ) -> Result<TrainOutcome> {
        if &last.arch != self.arch {
            return Err(Error::Config("checkpoint architecture differs from the requested one".into()));
        }
        let state = RunState {
            params: last.params,
            opt: last.optimizer,
            early: last.meta.early_stop,
            history: last.meta.history,
            epoch: last.meta.epoch,
            best,
        };
        self.run(state, train, val, on_epoch)
    }

    fn run(
        &self,
        mut s: RunState,
        train: &[Document],
        val: &[Document],
        mut on_epoch: impl FnMut(&EpochEvent) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        if val.is_empty() {
            return Err(Error::Parameter("validation set is empty".into()));
        }
        let (train, skipped_train) = filter_short(train, self.arch, "train");
        let (val, skipped_val) = filter_short(val, self.arch, "validation");
        if train.is_empty() || val.is_empty() {
            return Err(Error::Parameter("no documents left after dropping too-short ones".into()));
        }
        for d in train.iter().chain(&val) {
            if d.label >= self.arch.classes {
                return Err(Error::Parameter(format!("label {} outside 0..{}", d.label, self.arch.classes)));
            }
        }
        let mut best = match s.best.take() {
            Some(b) => b,
            None => self.checkpoint(&s, &s.params, &s.opt),
        };
        let best_key = |c: &Checkpoint| c.meta.best.as_ref().map(|m| (m.val_error, m.val_loss));

        let stop = loop {
            if s.epoch > 0 && s.early.should_stop(s.epoch) {
                break StopReason::Patience;
            }
            if cfg.max_epochs.is_some_and(|m| s.epoch >= m) {
                break StopReason::MaxEpochs;
            }
            let epoch = s.epoch + 1;
            let mut shuffle = Rng::with_stream(cfg.seed, 2 * epoch as u64);
            let batches = make_batches(&train, cfg.batch_size, &mut shuffle, true)?;
            let mode = Mode::Train {
                seed: dropout_seed(cfg.seed, epoch),
                dropout: self.arch.dropout_p,
            };
            // Work on copies so a divergent batch leaves the last good state intact.
            let mut params = s.params.clone();
            let mut opt = s.opt.clone();
            let mut train_loss = 0.0;
            let mut failure = None;
            for batch in &batches {
                match step(&mut params, &mut opt, batch, cfg, mode) {
                    Ok(l) => train_loss += l,
                    Err(Error::Numeric(m)) => {
                        failure = Some(m);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let evaluated = match failure {
                Some(m) => Err(m),
                None => match eval_docs(&params, &val, cfg.batch_size) {
                    Ok(r) if r.0.is_finite() => Ok(r),
                    Ok(r) => Err(format!("non-finite validation loss {}", r.0)),
                    Err(Error::Numeric(m)) => Err(m),
                    Err(e) => return Err(e),
                },
            };
            let (val_loss, preds) = match evaluated {
                Ok(r) => r,
                Err(message) => {
                    warn!("epoch {epoch}: training diverged ({message}); keeping the last good checkpoint");
                    break StopReason::Diverged { epoch, message };
                }
            };
            let wrong = val.iter().zip(&preds).filter(|(d, &p)| d.label != p).count();
            s.params = params;
            s.opt = opt;
            s.epoch = epoch;
            s.early.observe(epoch, val_loss / val.len() as f64);
            let metrics = EpochMetrics {
                epoch,
                train_loss: train_loss / train.len() as f64,
                val_loss: val_loss / val.len() as f64,
                val_error: wrong as f64 / val.len() as f64,
                patience: s.early.patience,
            };
            info!(
                "epoch {epoch}: train loss {:.6}, val loss {:.6}, val error {:.4}, patience {}",
                metrics.train_loss, metrics.val_loss, metrics.val_error, metrics.patience
            );
            s.history.push(metrics.clone());
            let mut last = self.checkpoint(&s, &s.params, &s.opt);
            let key = (metrics.val_error, metrics.val_loss);
            let new_best = best_key(&best).map_or(true, |b| key < b);
            if new_best {
                last.meta.best = Some(metrics.clone());
                best = last.clone();
            } else {
                last.meta.best = best.meta.best.clone();
            }
            on_epoch(&EpochEvent {
                metrics: &metrics,
                last: &last,
                best: &best,
                new_best,
            })?;
        };
        let mut last = self.checkpoint(&s, &s.params, &s.opt);
        last.meta.best = best.meta.best.clone();
        Ok(TrainOutcome {
            best,
            last,
            stop,
            skipped_train,
            skipped_val,
        })
    }
}
