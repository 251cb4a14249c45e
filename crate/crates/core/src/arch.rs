//! Architecture grammar `C{c}R1D{D}` and the closed-form parameter count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::VOCAB_SIZE;

pub const EMBED_DIM: usize = 8;
pub const DROPOUT_P: f64 = 0.5;

/// Receptive fields and pool sizes per conv depth, for depths 2 through 5.
const TABLE: [(&[usize], &[usize]); 4] = [
    (&[5, 3], &[2, 2]),
    (&[5, 5, 3], &[2, 2, 2]),
    (&[5, 5, 3, 3], &[2, 2, 2, 2]),
    (&[5, 5, 3, 3, 3], &[2, 2, 2, 1, 2]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub receptive: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: Option<String>,
    pub conv: Vec<ConvSpec>,
    pub recurrent_width: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub classes: usize,
    pub dropout_p: f64,
}

pub fn valid_arch_names() -> String {
    "C2R1D<D>, C3R1D<D>, C4R1D<D>, C5R1D<D> (D a positive integer, e.g. C2R1D128)".into()
}

/// Parses `C{2..5}R1D{D}` into the matching tabulated architecture.
pub fn parse_arch(name: &str, classes: usize) -> Result<ArchConfig> {
    let bad = || Error::Config(format!("unknown architecture {name:?}; valid names: {}", valid_arch_names()));
    let rest = name.strip_prefix('C').ok_or_else(bad)?;
    let (depth, rest) = rest.split_once("R1D").ok_or_else(bad)?;
    let depth: usize = depth.parse().map_err(|_| bad())?;
    let width: usize = rest.parse().map_err(|_| bad())?;
    if !(2..=5).contains(&depth) || width == 0 || rest.starts_with('+') || rest.starts_with('0') {
        return Err(bad());
    }
    let (fields, pools) = TABLE[depth - 2];
    let conv = fields
        .iter()
        .zip(pools)
        .map(|(&receptive, &pool)| ConvSpec {
            filters: width,
            receptive,
            pool,
        })
        .collect();
    let cfg = ArchConfig {
        name: Some(name.to_string()),
        conv,
        recurrent_width: width,
        embed_dim: EMBED_DIM,
        vocab_size: VOCAB_SIZE,
        classes,
        dropout_p: DROPOUT_P,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ArchConfig {
    /// Unnamed architecture with explicit sizes, e.g. the reduced gradient-check model.
    pub fn custom(embed_dim: usize, conv: Vec<ConvSpec>, recurrent_width: usize, classes: usize) -> Result<Self> {
        let cfg = ArchConfig {
            name: None,
            conv,
            recurrent_width,
            embed_dim,
            vocab_size: VOCAB_SIZE,
            classes,
            dropout_p: DROPOUT_P,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.conv.len()) {
            return Err(Error::Config(format!("conv depth must be 2..=5, got {}", self.conv.len())));
        }
        if self.conv.iter().any(|c| c.filters == 0 || c.receptive == 0 || c.pool == 0) {
            return Err(Error::Config("conv filters, receptive fields and pools must be positive".into()));
        }
        if self.recurrent_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!("vocabulary size must be {VOCAB_SIZE}")));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn pools(&self) -> Vec<usize> {
        self.conv.iter().map(|c| c.pool).collect()
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| "custom".into())
    }

    /// Depth fed into the recurrent layer.
    pub fn recurrent_input(&self) -> usize {
        self.conv.last().map_or(self.embed_dim, |c| c.filters)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub layers: Vec<(String, usize)>,
}

pub fn count_params(cfg: &ArchConfig) -> ParamCount {
    let mut layers = vec![("embedding".to_string(), cfg.embed_dim * cfg.vocab_size)];
    let mut d_in = cfg.embed_dim;
    for (i, c) in cfg.conv.iter().enumerate() {
        layers.push((format!("conv{i}"), c.filters * c.receptive * d_in + c.filters));
        d_in = c.filters;
    }
    let h = cfg.recurrent_width;
    layers.push(("bilstm".into(), 2 * 4 * (h * d_in + h * h + h)));
    layers.push(("classifier".into(), cfg.classes * 2 * h + cfg.classes));
    ParamCount {
        total: layers.iter().map(|(_, n)| n).sum(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c2_row() {
        let cfg = parse_arch("C2R1D128", 14).unwrap();
        let convs: Vec<_> = cfg.conv.iter().map(|c| (c.filters, c.receptive, c.pool)).collect();
        assert_eq!(convs, vec![(128, 5, 2), (128, 3, 2)]);
        assert_eq!(cfg.recurrent_width, 128);
        assert_eq!((cfg.embed_dim, cfg.vocab_size, cfg.dropout_p), (8, 96, 0.5));
    }

    #[test]
    fn c5_pools() {
        assert_eq!(parse_arch("C5R1D128", 4).unwrap().pools(), vec![2, 2, 2, 1, 2]);
        let fields: Vec<usize> = parse_arch("C4R1D16", 4).unwrap().conv.iter().map(|c| c.receptive).collect();
        assert_eq!(fields, vec![5, 5, 3, 3]);
    }

    #[test]
    fn rejects_unknown_names() {
        for name in ["C6R1D128", "C1R1D128", "C2R2D128", "C2R1D0", "C2R1D", "c2r1d128", "C2R1D12x", "C2R1D+5"] {
            let err = parse_arch(name, 4).unwrap_err();
            assert!(err.to_string().contains("C2R1D<D>"), "{name}: {err}");
        }
        assert!(parse_arch("C2R1D128", 1).is_err());
    }

    #[test]
    fn closed_form_counts() {
        let c = count_params(&parse_arch("C2R1D128", 14).unwrap());
        assert_eq!(c.total, 322_062);
        let parts: Vec<usize> = c.layers.iter().map(|(_, n)| *n).collect();
        assert_eq!(parts, vec![768, 5_248, 49_280, 263_168, 3_598]);
        let big = count_params(&parse_arch("C2R1D1024", 4).unwrap()).total;
        assert!((big as f64 - 20e6).abs() <= 2e6, "{big}");
    }
}
