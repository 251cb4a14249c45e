//! Central finite-difference check of every analytic gradient.
//!
//! The objective is the full training loss (summed NLL plus weight decay) on
//! one small synthetic batch with dropout on. Dropout masks are a function of
//! the seed and example ids only, so perturbed evaluations see the same masks.

use serde::Serialize;

use crate::arch::{ArchConfig, ConvSpec};
use crate::data::{Batch, Document};
use crate::error::Result;
use crate::head::{nll, weight_decay};
use crate::model::{backward, forward, ModelParams, Mode};
use crate::tensor::{Rng, Tensor};
use crate::vocab::Vocabulary;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor. Central differences at `STEP` carry roundoff of about
/// `ε·|loss|/STEP ≈ 1e-10`, so entries with gradients below this floor are in
/// effect held to an absolute error of `TOLERANCE · FLOOR = 1e-10`.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Entry with the largest relative error: index, analytic, numeric.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&TensorReport> {
        self.tensors.iter().filter(|t| !(t.max_rel_error < self.tolerance)).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Embedding 3, two conv layers of width 4, recurrent width 4, 3 classes.
pub fn reduced_arch() -> ArchConfig {
    let conv = vec![
        ConvSpec { filters: 4, receptive: 5, pool: 2 },
        ConvSpec { filters: 4, receptive: 3, pool: 2 },
    ];
    ArchConfig::custom(3, conv, 4, 3).expect("reduced architecture is valid")
}

/// Four random documents of length 4..=12 with mixed lengths.
pub fn reduced_batch(arch: &ArchConfig, rng: &mut Rng) -> Result<Batch> {
    let vocab = Vocabulary::build();
    let docs = [12usize, 9, 6, 4]
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let text: String = (0..len).map(|_| vocab.symbol(1 + rng.below(94)).unwrap()).collect();
            Document::new(i % arch.classes, text, &vocab, len)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch::from_docs(docs.iter().enumerate()))
}

fn objective(params: &ModelParams, batch: &Batch, mode: Mode, lambda: f64) -> Result<f64> {
    let fwd = forward(params, batch, mode)?;
    let data: f64 = nll(&fwd.log_probs, &batch.labels)?.iter().sum();
    Ok(data + weight_decay(params.decayed(), lambda))
}

/// Checks `params` on `batch`. `corrupt` may alter the analytic gradients
/// before comparison; it exists for negative-control tests.
pub fn check(
    params: &ModelParams,
    batch: &Batch,
    mode: Mode,
    lambda: f64,
    corrupt: Option<&dyn Fn(&mut ModelParams)>,
) -> Result<GradCheckReport> {
    let fwd = forward(params, batch, mode)?;
    let mut grads = backward(params, &fwd, &batch.labels)?;
    let decayed: Vec<bool> = params.named().iter().map(|n| n.decayed).collect();
    for ((g, w), &d) in grads.tensors_mut().into_iter().zip(params.tensors()).zip(&decayed) {
        if d {
            g.add_assign(&w.scale(lambda))?;
        }
    }
    if let Some(f) = corrupt {
        f(&mut grads);
    }
    let names = params.names();
    let analytic: Vec<&Tensor> = grads.tensors();
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel: f64 = 0.0;
        for i in 0..analytic[k].len() {
            let orig = probe.tensors()[k].data()[i];
            probe.tensors_mut()[k].data_mut()[i] = orig + STEP;
            let up = objective(&probe, batch, mode, lambda)?;
            probe.tensors_mut()[k].data_mut()[i] = orig - STEP;
            let down = objective(&probe, batch, mode, lambda)?;
            probe.tensors_mut()[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if !(rel <= max_rel) {
                max_rel = rel;
                worst = (i, a, numeric);
            }
        }
        tensors.push(TensorReport {
            name: name.clone(),
            max_rel_error: max_rel,
            worst,
        });
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: TOLERANCE,
    })
}

/// Gradient check of the reduced model initialized from `seed`.
pub fn grad_check(seed: u64) -> Result<GradCheckReport> {
    grad_check_with(seed, None)
}

pub fn grad_check_with(seed: u64, corrupt: Option<&dyn Fn(&mut ModelParams)>) -> Result<GradCheckReport> {
    let arch = reduced_arch();
    let mut rng = Rng::new(seed);
    let params = ModelParams::init(&arch, &mut rng)?;
    let batch = reduced_batch(&arch, &mut rng)?;
    let mode = Mode::Train {
        seed,
        dropout: arch.dropout_p,
    };
    check(&params, &batch, mode, 5e-4, corrupt)
}
