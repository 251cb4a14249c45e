use crate::error::{Error, Result};
use crate::layers::SeqActivation;
use crate::tensor::{relu, Real, Tensor};

/// Filter bank of `filters` windows of `receptive` steps, followed by bias and ReLU.
///
/// `filter` is `[filters × (receptive · d_in)]`; a window row is the
/// concatenation `[x_{t-⌊r/2⌋}; …; x_t; …; x_{t+r-1-⌊r/2⌋}]`, zero outside the sequence.
/// `pool` is the max-pool size applied after this layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f64> {
    pub filter: Tensor<T>,
    pub bias: Tensor<T>,
    pub receptive: usize,
    pub pool: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn filters(&self) -> usize {
        self.filter.shape()[0]
    }

    pub fn input_depth(&self) -> usize {
        self.filter.shape()[1] / self.receptive
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams {
            filter: self.filter.zeros_like(),
            bias: self.bias.zeros_like(),
            receptive: self.receptive,
            pool: self.pool,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T: Real = f64> {
    /// Unfolded windows, `[batch·steps × receptive·d_in]`.
    cols: Tensor<T>,
    /// Pre-activation, `[batch·steps × filters]`.
    pre: Tensor<T>,
}

fn unfold<T: Real>(x: &SeqActivation<T>, r: usize) -> Tensor<T> {
    let (b, s, d) = (x.batch(), x.steps(), x.depth());
    let left = r / 2;
    let width = r * d;
    let mut cols = Tensor::zeros(&[b * s, width]);
    let out = cols.data_mut();
    let src = x.values.data();
    for bi in 0..b {
        for t in 0..s {
            let row = (bi * s + t) * width;
            for j in 0..r {
                let src_t = t as isize + j as isize - left as isize;
                if src_t < 0 || src_t >= s as isize {
                    continue;
                }
                let from = (bi * s + src_t as usize) * d;
                out[row + j * d..row + (j + 1) * d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    cols
}

/// "Same"-length convolution; output mask equals the input mask.
pub fn conv_forward<T: Real>(x: &SeqActivation<T>, params: &ConvParams<T>) -> Result<(SeqActivation<T>, ConvCache<T>)> {
    if x.depth() != params.input_depth() || params.filter.shape()[1] != params.receptive * x.depth() {
        return Err(Error::dim("conv_forward", x.values.shape(), params.filter.shape()));
    }
    let (b, s) = (x.batch(), x.steps());
    let f = params.filters();
    let cols = unfold(x, params.receptive);
    let mut pre = cols.matmul_nt(&params.filter)?;
    let bias = params.bias.data();
    for row in pre.data_mut().chunks_mut(f) {
        for (v, &bb) in row.iter_mut().zip(bias) {
            *v = *v + bb;
        }
    }
    let mut out = Tensor::zeros(&[b, s, f]);
    {
        let o = out.data_mut();
        let p = pre.data();
        for bi in 0..b {
            for t in 0..s {
                if !x.mask.get(bi, t) {
                    continue;
                }
                let at = (bi * s + t) * f;
                for k in 0..f {
                    o[at + k] = relu(p[at + k]);
                }
            }
        }
    }
    Ok((
        SeqActivation {
            values: out,
            mask: x.mask.clone(),
        },
        ConvCache { cols, pre },
    ))
}

/// Accumulates filter and bias gradients into `grads`; returns `dL/dx` (zero where masked).
pub fn conv_backward<T: Real>(
    x: &SeqActivation<T>,
    params: &ConvParams<T>,
    cache: &ConvCache<T>,
    d_out: &Tensor<T>,
    grads: &mut ConvParams<T>,
) -> Result<Tensor<T>> {
    let (b, s, d) = (x.batch(), x.steps(), x.depth());
    let f = params.filters();
    let r = params.receptive;
    let mut d_pre = Tensor::zeros(&[b * s, f]);
    {
        let dp = d_pre.data_mut();
        let g = d_out.data();
        let pre = cache.pre.data();
        for bi in 0..b {
            for t in 0..s {
                if !x.mask.get(bi, t) {
                    continue;
                }
                let at = (bi * s + t) * f;
                for k in 0..f {
                    if pre[at + k] > T::zero() {
                        dp[at + k] = g[at + k];
                    }
                }
            }
        }
    }
    grads.filter.add_assign(&d_pre.matmul_tn(&cache.cols)?)?;
    {
        let db = grads.bias.data_mut();
        for row in d_pre.data().chunks(f) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    let d_cols = d_pre.matmul(&params.filter)?;
    let mut dx = Tensor::zeros(&[b, s, d]);
    let left = r / 2;
    let dxd = dx.data_mut();
    let dc = d_cols.data();
    let width = r * d;
    for bi in 0..b {
        for t in 0..s {
            let row = (bi * s + t) * width;
            for j in 0..r {
                let src_t = t as isize + j as isize - left as isize;
                if src_t < 0 || src_t >= s as isize || !x.mask.get(bi, src_t as usize) {
                    continue;
                }
                let to = (bi * s + src_t as usize) * d;
                for k in 0..d {
                    dxd[to + k] = dxd[to + k] + dc[row + j * d + k];
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mask;
    use crate::tensor::{sample_uniform, Rng};

    fn seq(b: usize, s: usize, d: usize, data: Vec<f64>, lengths: &[usize]) -> SeqActivation {
        let mut values = Tensor::from_vec(&[b, s, d], data).unwrap();
        let mask = Mask::from_lengths(lengths, s);
        for bi in 0..b {
            for t in 0..s {
                if !mask.get(bi, t) {
                    for k in 0..d {
                        values.data_mut()[(bi * s + t) * d + k] = 0.0;
                    }
                }
            }
        }
        SeqActivation { values, mask }
    }

    #[test]
    fn ones_filter_hand_convolution() {
        let x = seq(1, 3, 1, vec![1.0, 2.0, 3.0], &[3]);
        let params = ConvParams {
            filter: Tensor::full(&[1, 3], 1.0),
            bias: Tensor::zeros(&[1]),
            receptive: 3,
            pool: 1,
        };
        let (out, cache) = conv_forward(&x, &params).unwrap();
        assert_eq!(cache.pre.data(), &[3.0, 6.0, 5.0]);
        assert_eq!(out.values.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn even_receptive_field_pads_more_on_the_left() {
        // r = 4: two zeros on the left, one on the right.
        let x = seq(1, 3, 1, vec![1.0, 10.0, 100.0], &[3]);
        let params = ConvParams {
            filter: Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
            receptive: 4,
            pool: 1,
        };
        let (out, _) = conv_forward(&x, &params).unwrap();
        assert_eq!(out.values.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_bank_gives_zero_and_depth_is_checked() {
        let mut rng = Rng::new(1);
        let x = seq(2, 5, 3, sample_uniform(&mut rng, &[30], -1.0, 1.0).unwrap().into_data(), &[5, 2]);
        let params = ConvParams {
            filter: Tensor::zeros(&[4, 9]),
            bias: Tensor::zeros(&[4]),
            receptive: 3,
            pool: 2,
        };
        let (out, _) = conv_forward(&x, &params).unwrap();
        assert!(out.values.data().iter().all(|&v| v == 0.0));
        let bad = ConvParams {
            filter: Tensor::zeros(&[4, 6]),
            bias: Tensor::zeros(&[4]),
            receptive: 3,
            pool: 2,
        };
        assert!(matches!(conv_forward(&x, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn masked_outputs_are_zero() {
        let mut rng = Rng::new(2);
        let x = seq(2, 6, 2, sample_uniform(&mut rng, &[24], -1.0, 1.0).unwrap().into_data(), &[6, 3]);
        let params = ConvParams {
            filter: sample_uniform(&mut rng, &[3, 10], -1.0, 1.0).unwrap(),
            bias: Tensor::full(&[3], 0.5),
            receptive: 5,
            pool: 2,
        };
        let (out, _) = conv_forward(&x, &params).unwrap();
        for t in 3..6 {
            assert_eq!(out.at(1, t), &[0.0; 3]);
        }
    }

    #[test]
    fn filter_gradient_matches_central_differences() {
        let mut rng = Rng::new(7);
        let x = seq(2, 7, 4, sample_uniform(&mut rng, &[56], -1.0, 1.0).unwrap().into_data(), &[7, 5]);
        let params = ConvParams {
            filter: sample_uniform(&mut rng, &[3, 12], -1.0, 1.0).unwrap(),
            bias: sample_uniform(&mut rng, &[3], -0.2, 0.2).unwrap(),
            receptive: 3,
            pool: 1,
        };
        let weights: Tensor = sample_uniform(&mut rng, &[2, 7, 3], -1.0, 1.0).unwrap();
        let loss = |p: &ConvParams, x: &SeqActivation| {
            let (o, _) = conv_forward(x, p).unwrap();
            o.values.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = conv_forward(&x, &params).unwrap();
        let mut grads = params.zeros_like();
        let dx = conv_backward(&x, &params, &cache, &weights, &mut grads).unwrap();
        let h = 1e-5;
        let check = |ana: f64, num: f64, what: &str| {
            let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-6, "{what}: {ana} vs {num}");
        };
        for i in 0..params.filter.len() {
            let mut p = params.clone();
            p.filter.data_mut()[i] += h;
            let up = loss(&p, &x);
            p.filter.data_mut()[i] -= 2.0 * h;
            check(grads.filter.data()[i], (up - loss(&p, &x)) / (2.0 * h), "filter");
        }
        for i in 0..params.bias.len() {
            let mut p = params.clone();
            p.bias.data_mut()[i] += h;
            let up = loss(&p, &x);
            p.bias.data_mut()[i] -= 2.0 * h;
            check(grads.bias.data()[i], (up - loss(&p, &x)) / (2.0 * h), "bias");
        }
        for i in 0..x.values.len() {
            let (b, t) = (i / 28, (i / 4) % 7);
            if !x.mask.get(b, t) {
                assert_eq!(dx.data()[i], 0.0);
                continue;
            }
            let mut xp = x.clone();
            xp.values.data_mut()[i] += h;
            let up = loss(&params, &xp);
            xp.values.data_mut()[i] -= 2.0 * h;
            check(dx.data()[i], (up - loss(&params, &xp)) / (2.0 * h), "input");
        }
    }
}
