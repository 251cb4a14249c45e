//! Binary checkpoint format.
//!
//! ```text
//! "CRNC"                         magic
//! u32                            format version
//! u32                            entry count
//! entry*:
//!   u32 name length, name bytes  UTF-8
//!   u32 rank, u64 dims[rank]
//!   f64 payload[prod(dims)]      little-endian
//! u64 metadata length, bytes     UTF-8 JSON
//! ```
//!
//! Entries are the model parameters in canonical order followed by the
//! AdaDelta accumulators (`adadelta.acc_grad_sq.<name>`, then
//! `adadelta.acc_update_sq.<name>`). All integers are little-endian. The
//! metadata carries the architecture, vocabulary and training state. Encoding
//! is a pure function of the checkpoint, so save → load → save is byte-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, INIT_SCHEME};
use crate::optim::AdaDeltaState;
use crate::tensor::{Tensor, RNG_ALGORITHM};
use crate::trainer::{EarlyStopState, EpochMetrics, TrainConfig};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"CRNC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub early_stop: EarlyStopState,
    /// Metrics of the epoch with the lowest validation error so far.
    pub best: Option<EpochMetrics>,
    pub history: Vec<EpochMetrics>,
    pub init_scheme: String,
    pub rng_algorithm: String,
}

impl CheckpointMeta {
    pub fn new(train: TrainConfig, epoch: usize, early_stop: EarlyStopState, history: Vec<EpochMetrics>) -> Self {
        CheckpointMeta {
            train,
            epoch,
            early_stop,
            best: None,
            history,
            init_scheme: INIT_SCHEME.into(),
            rng_algorithm: RNG_ALGORITHM.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub optimizer: AdaDeltaState,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    vocabulary: String,
    rho: f64,
    eps: f64,
    meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.params.names();
        let tensors = self.params.tensors();
        if self.optimizer.acc_grad_sq.len() != names.len() || self.optimizer.acc_update_sq.len() != names.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, 3 * names.len())?;
        for (n, t) in names.iter().zip(&tensors) {
            put_entry(&mut out, n, t)?;
        }
        for (n, t) in names.iter().zip(&self.optimizer.acc_grad_sq) {
            put_entry(&mut out, &format!("adadelta.acc_grad_sq.{n}"), t)?;
        }
        for (n, t) in names.iter().zip(&self.optimizer.acc_update_sq) {
            put_entry(&mut out, &format!("adadelta.acc_update_sq.{n}"), t)?;
        }
        let header = Header {
            arch: self.arch.clone(),
            vocabulary: self.vocab.symbols().iter().collect(),
            rho: self.optimizer.rho,
            eps: self.optimizer.eps,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.u32()?;
        let entries = (0..count).map(|_| r.entry()).collect::<Result<Vec<_>>>()?;
        let n = r.u64()?;
        let header: Header =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        header.arch.validate()?;
        let vocab = Vocabulary::from_symbols(header.vocabulary.chars().collect())?;

        let mut params = ModelParams::zeros(&header.arch);
        let names = params.names();
        if entries.len() != 3 * names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} entries, found {}",
                3 * names.len(),
                entries.len()
            )));
        }
        let mut entries = entries.into_iter();
        let mut expect = |name: &str, like: &Tensor| -> Result<Tensor> {
            let (got, t) = entries.next().unwrap();
            if got != name {
                return Err(Error::Checkpoint(format!("expected entry {name}, found {got}")));
            }
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match the architecture ({:?})",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        for (slot, name) in params.tensors_mut().into_iter().zip(&names) {
            *slot = expect(name, slot)?;
        }
        let mut acc_grad_sq = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(params.tensors()) {
            acc_grad_sq.push(expect(&format!("adadelta.acc_grad_sq.{name}"), t)?);
        }
        let mut acc_update_sq = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(params.tensors()) {
            acc_update_sq.push(expect(&format!("adadelta.acc_update_sq.{name}"), t)?);
        }
        Ok(Checkpoint {
            arch: header.arch,
            vocab,
            params,
            optimizer: AdaDeltaState {
                rho: header.rho,
                eps: header.eps,
                acc_grad_sq,
                acc_update_sq,
            },
            meta: header.meta,
        })
    }

    /// Writes to a sibling temporary file first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
