use crate::data::Mask;
use crate::error::{Error, Result};
use crate::layers::SeqActivation;
use crate::tensor::{Real, Tensor};

/// Sequence length after a stack of poolings, folding `⌊T / r′⌋`.
pub fn conv_stack_out_length(length: usize, pools: &[usize]) -> Result<usize> {
    let out = pools.iter().fold(length, |t, &p| t / p.max(1));
    if out == 0 {
        return Err(Error::SequenceTooShort {
            length,
            minimum: min_input_length(pools),
        });
    }
    Ok(out)
}

/// Smallest input length that survives every pooling stage.
pub fn min_input_length(pools: &[usize]) -> usize {
    pools.iter().map(|&p| p.max(1)).product()
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    in_steps: usize,
    /// Input step chosen by the max, per `(batch, out_step, feature)`; `None` where masked.
    argmax: Vec<Option<usize>>,
}

/// Non-overlapping max-pool of width `size`, trailing remainder dropped.
///
/// An output step is valid only when its whole window is valid, so a document's
/// pooled length is `⌊len / size⌋` whether or not it sits in a padded batch.
/// Ties resolve to the earliest step.
pub fn maxpool_forward<T: Real>(x: &SeqActivation<T>, size: usize) -> Result<(SeqActivation<T>, PoolCache)> {
    if size == 0 {
        return Err(Error::Parameter("pool size must be at least 1".into()));
    }
    let (b, s, d) = (x.batch(), x.steps(), x.depth());
    let out_steps = s / size;
    if out_steps == 0 {
        return Err(Error::SequenceTooShort { length: s, minimum: size });
    }
    let mut out = Tensor::zeros(&[b, out_steps, d]);
    let mut argmax = vec![None; b * out_steps * d];
    let mut mask = vec![false; b * out_steps];
    let src = x.values.data();
    let o = out.data_mut();
    for bi in 0..b {
        for t in 0..out_steps {
            let start = t * size;
            if !(start..start + size).all(|u| x.mask.get(bi, u)) {
                continue;
            }
            mask[bi * out_steps + t] = true;
            for k in 0..d {
                let mut best = start;
                let mut best_v = src[(bi * s + start) * d + k];
                for u in start + 1..start + size {
                    let v = src[(bi * s + u) * d + k];
                    if v > best_v {
                        best_v = v;
                        best = u;
                    }
                }
                let at = (bi * out_steps + t) * d + k;
                o[at] = best_v;
                argmax[at] = Some(best);
            }
        }
    }
    Ok((
        SeqActivation {
            values: out,
            mask: Mask::from_vec(b, out_steps, mask),
        },
        PoolCache { in_steps: s, argmax },
    ))
}

/// Routes each output gradient to the input step that won the max.
pub fn maxpool_backward<T: Real>(cache: &PoolCache, d_out: &Tensor<T>) -> Tensor<T> {
    let (b, out_steps, d) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let s = cache.in_steps;
    let mut dx = Tensor::zeros(&[b, s, d]);
    let dxd = dx.data_mut();
    let g = d_out.data();
    for bi in 0..b {
        for t in 0..out_steps {
            for k in 0..d {
                let at = (bi * out_steps + t) * d + k;
                if let Some(u) = cache.argmax[at] {
                    let to = (bi * s + u) * d + k;
                    dxd[to] = dxd[to] + g[at];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq1(values: &[f64], lengths: &[usize], steps: usize) -> SeqActivation {
        SeqActivation {
            values: Tensor::from_vec(&[lengths.len(), steps, 1], values.to_vec()).unwrap(),
            mask: Mask::from_lengths(lengths, steps),
        }
    }

    #[test]
    fn pairs() {
        let (out, _) = maxpool_forward(&seq1(&[1.0, 3.0, 2.0, 5.0], &[4], 4), 2).unwrap();
        assert_eq!(out.values.data(), &[3.0, 5.0]);
    }

    #[test]
    fn remainder_dropped() {
        let (out, _) = maxpool_forward(&seq1(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5], 5), 2).unwrap();
        assert_eq!(out.steps(), 2);
        assert_eq!(out.values.data(), &[2.0, 4.0]);
        assert!(maxpool_forward(&seq1(&[1.0], &[1], 1), 2).is_err());
    }

    #[test]
    fn partial_windows_are_masked() {
        // length 3 in a width-5 batch: window [2,3] is half padding.
        let (out, _) = maxpool_forward(&seq1(&[1.0, 2.0, 3.0, 0.0, 0.0], &[3], 5), 2).unwrap();
        assert_eq!(out.mask.row(0), &[true, false]);
        assert_eq!(out.values.data(), &[2.0, 0.0]);
    }

    #[test]
    fn ties_route_to_earliest() {
        let x = seq1(&[4.0, 4.0, -1.0, -1.0], &[4], 4);
        let (_, cache) = maxpool_forward(&x, 2).unwrap();
        let d = maxpool_backward(&cache, &Tensor::from_vec(&[1, 2, 1], vec![1.0, 2.0]).unwrap());
        assert_eq!(d.data(), &[1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn backward_matches_finite_differences_off_ties() {
        let vals = [0.3, -0.7, 1.1, 0.9, -0.2, 0.05, 0.6];
        let x = seq1(&vals, &[7], 7);
        let w = [0.5, -1.5, 2.0];
        let f = |x: &SeqActivation| {
            let (o, _) = maxpool_forward(x, 2).unwrap();
            o.values.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = maxpool_forward(&x, 2).unwrap();
        let dx = maxpool_backward(&cache, &Tensor::from_vec(&[1, 3, 1], w.to_vec()).unwrap());
        let h = 1e-5;
        for i in 0..7 {
            let mut xp = x.clone();
            xp.values.data_mut()[i] += h;
            let up = f(&xp);
            xp.values.data_mut()[i] -= 2.0 * h;
            let num = (up - f(&xp)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() < 1e-8, "{i}: {} vs {num}", dx.data()[i]);
        }
    }

    #[test]
    fn stack_lengths() {
        assert_eq!(conv_stack_out_length(100, &[2, 2]).unwrap(), 25);
        assert_eq!(conv_stack_out_length(100, &[2, 2, 2, 1, 2]).unwrap(), 6);
        match conv_stack_out_length(3, &[2, 2]) {
            Err(Error::SequenceTooShort { minimum, .. }) => assert_eq!(minimum, 4),
            other => panic!("{other:?}"),
        }
    }
}
