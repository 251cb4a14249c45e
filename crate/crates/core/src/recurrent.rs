//! LSTM cell, the bidirectional layer over masked sequences, and the
//! last-state readout, each with its backpropagation-through-time pass.
//!
//! Gate equations, with `σ` the logistic function:
//!
//! ```text
//! i = σ(W_i x + U_i h₋ + b_i)     o = σ(W_o x + U_o h₋ + b_o)
//! f = σ(W_f x + U_f h₋ + b_f)     c̃ = tanh(W_c x + U_c h₋ + b_c)
//! c = i ⊙ c̃ + f ⊙ c₋             h = o ⊙ tanh(c)
//! ```
//!
//! At a masked step the state is carried through untouched and the emitted
//! hidden vector is zero, so trailing padding never changes a document's result.

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::layers::SeqActivation;
use crate::tensor::{sigmoid, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T: Real = f64> {
    pub w_i: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_f: Tensor<T>,
    pub w_c: Tensor<T>,
    pub u_i: Tensor<T>,
    pub u_o: Tensor<T>,
    pub u_f: Tensor<T>,
    pub u_c: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_o: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_c: Tensor<T>,
}

pub const LSTM_TENSOR_NAMES: [&str; 12] = [
    "w_i", "w_o", "w_f", "w_c", "u_i", "u_o", "u_f", "u_c", "b_i", "b_o", "b_f", "b_c",
];

impl<T: Real> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, input]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        LstmParams {
            w_i: w(),
            w_o: w(),
            w_f: w(),
            w_c: w(),
            u_i: u(),
            u_o: u(),
            u_f: u(),
            u_c: u(),
            b_i: b(),
            b_o: b(),
            b_f: b(),
            b_c: b(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_i.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden())
    }

    /// Tensors in [`LSTM_TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.w_i, &self.w_o, &self.w_f, &self.w_c, &self.u_i, &self.u_o, &self.u_f, &self.u_c,
            &self.b_i, &self.b_o, &self.b_f, &self.b_c,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.w_i,
            &mut self.w_o,
            &mut self.w_f,
            &mut self.w_c,
            &mut self.u_i,
            &mut self.u_o,
            &mut self.u_f,
            &mut self.u_c,
            &mut self.b_i,
            &mut self.b_o,
            &mut self.b_f,
            &mut self.b_c,
        ]
    }

    fn check(&self) -> Result<()> {
        let (h, d) = (self.hidden(), self.input_dim());
        for (name, t) in LSTM_TENSOR_NAMES.iter().zip(self.tensors()) {
            let want: &[usize] = match name.as_bytes()[0] {
                b'w' => &[h, d],
                b'u' => &[h, h],
                _ => &[h],
            };
            if t.shape() != want {
                return Err(Error::dim("lstm params", t.shape(), want));
            }
        }
        Ok(())
    }

    /// Gate blocks stacked in i, o, f, c order: `[4h × d_in]`, `[4h × h]`, `[4h]`.
    fn stacked(&self) -> (Tensor<T>, Tensor<T>, Vec<T>) {
        let cat = |parts: [&Tensor<T>; 4], rows: usize, cols: usize| {
            let data: Vec<T> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::from_vec(&[rows, cols], data).expect("stacked gate shape")
        };
        let (h, d) = (self.hidden(), self.input_dim());
        let w = cat([&self.w_i, &self.w_o, &self.w_f, &self.w_c], 4 * h, d);
        let u = cat([&self.u_i, &self.u_o, &self.u_f, &self.u_c], 4 * h, h);
        let b = [&self.b_i, &self.b_o, &self.b_f, &self.b_c]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        (w, u, b)
    }

    /// Adds stacked-gate gradients back into the individual tensors.
    fn add_stacked(&mut self, dw: &Tensor<T>, du: &Tensor<T>, db: &[T]) {
        let h = self.hidden();
        let (wd, ud) = (self.input_dim(), h);
        let LstmParams {
            w_i, w_o, w_f, w_c, u_i, u_o, u_f, u_c, b_i, b_o, b_f, b_c,
        } = self;
        for (g, t) in [w_i, w_o, w_f, w_c].into_iter().enumerate() {
            add_slice(t.data_mut(), &dw.data()[g * h * wd..(g + 1) * h * wd]);
        }
        for (g, t) in [u_i, u_o, u_f, u_c].into_iter().enumerate() {
            add_slice(t.data_mut(), &du.data()[g * h * ud..(g + 1) * h * ud]);
        }
        for (g, t) in [b_i, b_o, b_f, b_c].into_iter().enumerate() {
            add_slice(t.data_mut(), &db[g * h..(g + 1) * h]);
        }
    }
}

fn add_slice<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T: Real = f64> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

/// One unmasked step for a `[B × d_in]` input.
pub fn lstm_step<T: Real>(x_t: &Tensor<T>, state: &LstmState<T>, params: &LstmParams<T>) -> Result<LstmState<T>> {
    params.check()?;
    let h = params.hidden();
    if x_t.shape().len() != 2 || x_t.shape()[1] != params.input_dim() {
        return Err(Error::dim("lstm_step", x_t.shape(), params.w_i.shape()));
    }
    let b = x_t.shape()[0];
    if state.h.shape() != [b, h] || state.c.shape() != [b, h] {
        return Err(Error::dim("lstm_step", state.h.shape(), &[b, h]));
    }
    let (w, u, bias) = params.stacked();
    let mut pre = x_t.matmul_nt(&w)?;
    pre.add_assign(&state.h.matmul_nt(&u)?)?;
    let mut next = LstmState::zeros(b, h);
    for bi in 0..b {
        let row = &pre.data()[bi * 4 * h..(bi + 1) * 4 * h];
        for k in 0..h {
            let g = gates(row, &bias, h, k);
            let c = g.i * g.g + g.f * state.c.data()[bi * h + k];
            next.c.data_mut()[bi * h + k] = c;
            next.h.data_mut()[bi * h + k] = g.o * c.tanh();
        }
    }
    Ok(next)
}

struct Gates<T> {
    i: T,
    o: T,
    f: T,
    g: T,
}

#[inline]
fn gates<T: Real>(pre: &[T], bias: &[T], h: usize, k: usize) -> Gates<T> {
    Gates {
        i: sigmoid(pre[k] + bias[k]),
        o: sigmoid(pre[h + k] + bias[h + k]),
        f: sigmoid(pre[2 * h + k] + bias[2 * h + k]),
        g: (pre[3 * h + k] + bias[3 * h + k]).tanh(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams<T: Real = f64> {
    pub forward: LstmParams<T>,
    pub reverse: LstmParams<T>,
}

impl<T: Real> BiLstmParams<T> {
    pub fn zeros_like(&self) -> Self {
        BiLstmParams {
            forward: self.forward.zeros_like(),
            reverse: self.reverse.zeros_like(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }
}

/// Everything one direction needs for BPTT, laid out `[batch·steps × …]` by time position.
#[derive(Debug, Clone)]
struct DirectionCache<T: Real> {
    /// Post-activation gates, `[B·T × 4h]` in i, o, f, c̃ order.
    gates: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
    h_prev: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache<T: Real = f64> {
    forward: DirectionCache<T>,
    reverse: DirectionCache<T>,
}

fn time_order(steps: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    }
}

fn run_direction<T: Real>(
    x: &SeqActivation<T>,
    params: &LstmParams<T>,
    reverse: bool,
) -> Result<(Tensor<T>, DirectionCache<T>)> {
    let (b, s, d) = (x.batch(), x.steps(), x.depth());
    let h = params.hidden();
    let (w, u, bias) = params.stacked();
    let xs = x.values.clone().reshape(&[b * s, d])?;
    let proj = xs.matmul_nt(&w)?;
    let mut out = Tensor::zeros(&[b, s, h]);
    let mut cache = DirectionCache {
        gates: vec![T::zero(); b * s * 4 * h],
        c_prev: vec![T::zero(); b * s * h],
        tanh_c: vec![T::zero(); b * s * h],
        h_prev: Tensor::zeros(&[b * s, h]),
    };
    let mut state = LstmState::<T>::zeros(b, h);
    for t in time_order(s, reverse) {
        let rec = state.h.matmul_nt(&u)?;
        for bi in 0..b {
            let pos = bi * s + t;
            cache.h_prev.data_mut()[pos * h..(pos + 1) * h]
                .copy_from_slice(&state.h.data()[bi * h..(bi + 1) * h]);
            cache.c_prev[pos * h..(pos + 1) * h].copy_from_slice(&state.c.data()[bi * h..(bi + 1) * h]);
            if !x.mask.get(bi, t) {
                continue;
            }
            let p = &proj.data()[pos * 4 * h..(pos + 1) * 4 * h];
            let r = &rec.data()[bi * 4 * h..(bi + 1) * 4 * h];
            let pre: Vec<T> = p.iter().zip(r).map(|(&a, &b)| a + b).collect();
            for k in 0..h {
                let g = gates(&pre, &bias, h, k);
                let gate_row = &mut cache.gates[pos * 4 * h..(pos + 1) * 4 * h];
                gate_row[k] = g.i;
                gate_row[h + k] = g.o;
                gate_row[2 * h + k] = g.f;
                gate_row[3 * h + k] = g.g;
                let c = g.i * g.g + g.f * state.c.data()[bi * h + k];
                let tc = c.tanh();
                let hv = g.o * tc;
                cache.tanh_c[pos * h + k] = tc;
                state.c.data_mut()[bi * h + k] = c;
                state.h.data_mut()[bi * h + k] = hv;
                out.data_mut()[pos * h + k] = hv;
            }
        }
    }
    Ok((out, cache))
}

fn backprop_direction<T: Real>(
    x: &SeqActivation<T>,
    params: &LstmParams<T>,
    cache: &DirectionCache<T>,
    d_out: &Tensor<T>,
    reverse: bool,
    grads: &mut LstmParams<T>,
) -> Result<Tensor<T>> {
    let (b, s, d) = (x.batch(), x.steps(), x.depth());
    let h = params.hidden();
    let (w, u, _) = params.stacked();
    let mut d_pre = Tensor::zeros(&[b * s, 4 * h]);
    let mut dh = vec![T::zero(); b * h];
    let mut dc = vec![T::zero(); b * h];
    let one = T::one();
    for t in time_order(s, reverse).into_iter().rev() {
        let mut step_pre = Tensor::zeros(&[b, 4 * h]);
        for bi in 0..b {
            if !x.mask.get(bi, t) {
                // Carried state: gradients pass through unchanged.
                continue;
            }
            let pos = bi * s + t;
            let g = &cache.gates[pos * 4 * h..(pos + 1) * 4 * h];
            let row = &mut step_pre.data_mut()[bi * 4 * h..(bi + 1) * 4 * h];
            for k in 0..h {
                let (gi, go, gf, gg) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = cache.tanh_c[pos * h + k];
                let dh_k = dh[bi * h + k] + d_out.data()[pos * h + k];
                let dc_k = dc[bi * h + k] + dh_k * go * (one - tc * tc);
                row[k] = dc_k * gg * gi * (one - gi);
                row[h + k] = dh_k * tc * go * (one - go);
                row[2 * h + k] = dc_k * cache.c_prev[pos * h + k] * gf * (one - gf);
                row[3 * h + k] = dc_k * gi * (one - gg * gg);
                dc[bi * h + k] = dc_k * gf;
            }
        }
        let dh_prev = step_pre.matmul(&u)?;
        for bi in 0..b {
            if !x.mask.get(bi, t) {
                continue;
            }
            let pos = bi * s + t;
            dh[bi * h..(bi + 1) * h].copy_from_slice(&dh_prev.data()[bi * h..(bi + 1) * h]);
            d_pre.data_mut()[pos * 4 * h..(pos + 1) * 4 * h]
                .copy_from_slice(&step_pre.data()[bi * 4 * h..(bi + 1) * 4 * h]);
        }
    }
    let xs = x.values.clone().reshape(&[b * s, d])?;
    let dw = d_pre.matmul_tn(&xs)?;
    let du = d_pre.matmul_tn(&cache.h_prev)?;
    let mut db = vec![T::zero(); 4 * h];
    for row in d_pre.data().chunks(4 * h) {
        add_slice(&mut db, row);
    }
    grads.add_stacked(&dw, &du, &db);
    d_pre.matmul(&w)?.reshape(&[b, s, d])
}

/// Runs both directions. Returns `(H_forward, H_reverse)`, each `[B × T × h]`.
pub fn bilstm_forward<T: Real>(
    x: &SeqActivation<T>,
    params: &BiLstmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, BiLstmCache<T>)> {
    params.forward.check()?;
    params.reverse.check()?;
    if params.forward.input_dim() != x.depth() || params.reverse.input_dim() != x.depth() {
        return Err(Error::dim("bilstm_forward", x.values.shape(), params.forward.w_i.shape()));
    }
    if params.forward.hidden() != params.reverse.hidden() {
        return Err(Error::dim("bilstm_forward", params.forward.w_i.shape(), params.reverse.w_i.shape()));
    }
    for (bi, len) in x.mask.lengths().into_iter().enumerate() {
        if len == 0 {
            return Err(Error::Parameter(format!(
                "example {bi} has no valid steps left for the recurrent layer"
            )));
        }
    }
    let (h_fwd, fwd) = run_direction(x, &params.forward, false)?;
    let (h_rev, rev) = run_direction(x, &params.reverse, true)?;
    Ok((h_fwd, h_rev, BiLstmCache { forward: fwd, reverse: rev }))
}

/// Accumulates parameter gradients; returns `dL/dx`.
pub fn bilstm_backward<T: Real>(
    x: &SeqActivation<T>,
    params: &BiLstmParams<T>,
    cache: &BiLstmCache<T>,
    d_fwd: &Tensor<T>,
    d_rev: &Tensor<T>,
    grads: &mut BiLstmParams<T>,
) -> Result<Tensor<T>> {
    let mut dx = backprop_direction(x, &params.forward, &cache.forward, d_fwd, false, &mut grads.forward)?;
    let dr = backprop_direction(x, &params.reverse, &cache.reverse, d_rev, true, &mut grads.reverse)?;
    dx.add_assign(&dr)?;
    Ok(dx)
}

/// `[h_fwd at the last valid step ; h_rev at step 1]`, `[B × 2h]`.
pub fn last_state_readout<T: Real>(h_fwd: &Tensor<T>, h_rev: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let (b, s, h) = (h_fwd.shape()[0], h_fwd.shape()[1], h_fwd.shape()[2]);
    if h_rev.shape() != h_fwd.shape() {
        return Err(Error::dim("last_state_readout", h_fwd.shape(), h_rev.shape()));
    }
    let mut out = Tensor::zeros(&[b, 2 * h]);
    for bi in 0..b {
        let last = mask
            .last_valid(bi)
            .ok_or_else(|| Error::Parameter(format!("example {bi} has no valid steps")))?;
        let f = (bi * s + last) * h;
        let r = bi * s * h;
        let row = &mut out.data_mut()[bi * 2 * h..(bi + 1) * 2 * h];
        row[..h].copy_from_slice(&h_fwd.data()[f..f + h]);
        row[h..].copy_from_slice(&h_rev.data()[r..r + h]);
    }
    Ok(out)
}

/// Scatters the readout gradient back onto the two hidden-state sequences.
pub fn last_state_readout_backward<T: Real>(
    d_readout: &Tensor<T>,
    mask: &Mask,
    hidden: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, s, h) = (mask.rows(), mask.steps(), hidden);
    let mut d_fwd = Tensor::zeros(&[b, s, h]);
    let mut d_rev = Tensor::zeros(&[b, s, h]);
    for bi in 0..b {
        let last = mask
            .last_valid(bi)
            .ok_or_else(|| Error::Parameter(format!("example {bi} has no valid steps")))?;
        let row = &d_readout.data()[bi * 2 * h..(bi + 1) * 2 * h];
        let f = (bi * s + last) * h;
        d_fwd.data_mut()[f..f + h].copy_from_slice(&row[..h]);
        let r = bi * s * h;
        d_rev.data_mut()[r..r + h].copy_from_slice(&row[h..]);
    }
    Ok((d_fwd, d_rev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample_uniform, Rng};

    fn random_lstm(rng: &mut Rng, input: usize, hidden: usize) -> LstmParams {
        let mut p = LstmParams::zeros(input, hidden);
        for t in p.tensors_mut() {
            *t = sample_uniform(rng, t.shape(), -0.6, 0.6).unwrap();
        }
        p
    }

    fn random_seq(rng: &mut Rng, lengths: &[usize], steps: usize, depth: usize) -> SeqActivation {
        let mask = Mask::from_lengths(lengths, steps);
        let mut values: Tensor = sample_uniform(rng, &[lengths.len(), steps, depth], -1.0, 1.0).unwrap();
        for b in 0..lengths.len() {
            for t in lengths[b]..steps {
                for k in 0..depth {
                    values.data_mut()[(b * steps + t) * depth + k] = 0.0;
                }
            }
        }
        SeqActivation { values, mask }
    }

    #[test]
    fn zero_params_give_half_gates_and_zero_state() {
        let p: LstmParams = LstmParams::zeros(3, 2);
        let x = Tensor::from_vec(&[1, 3], vec![0.4, -2.0, 1.0]).unwrap();
        let s = lstm_step(&x, &LstmState::zeros(1, 2), &p).unwrap();
        assert_eq!(s.c.data(), &[0.0, 0.0]);
        assert_eq!(s.h.data(), &[0.0, 0.0]);
    }

    #[test]
    fn strong_forget_bias_keeps_memory() {
        let mut p: LstmParams = LstmParams::zeros(2, 2);
        p.b_f = Tensor::full(&[2], 10.0);
        let prior = LstmState {
            h: Tensor::zeros(&[1, 2]),
            c: Tensor::from_vec(&[1, 2], vec![1.5, -3.0]).unwrap(),
        };
        let s = lstm_step(&Tensor::zeros(&[1, 2]), &prior, &p).unwrap();
        let keep = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((keep - 0.99995).abs() < 1e-5);
        assert!((s.c.data()[0] - 1.5 * keep).abs() < 1e-15);
        assert!((s.c.data()[1] + 3.0 * keep).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_bad_shapes() {
        let p: LstmParams = LstmParams::zeros(3, 2);
        assert!(lstm_step(&Tensor::zeros(&[1, 4]), &LstmState::zeros(1, 2), &p).is_err());
        assert!(lstm_step(&Tensor::zeros(&[1, 3]), &LstmState::zeros(2, 2), &p).is_err());
    }

    #[test]
    fn layer_agrees_with_stepwise_cell() {
        let mut rng = Rng::new(3);
        let p = BiLstmParams {
            forward: random_lstm(&mut rng, 3, 4),
            reverse: random_lstm(&mut rng, 3, 4),
        };
        let x = random_seq(&mut rng, &[5], 5, 3);
        let (hf, hr, _) = bilstm_forward(&x, &p).unwrap();
        let mut state = LstmState::zeros(1, 4);
        for t in 0..5 {
            let xt = Tensor::from_vec(&[1, 3], x.at(0, t).to_vec()).unwrap();
            state = lstm_step(&xt, &state, &p.forward).unwrap();
            for k in 0..4 {
                assert!((state.h.data()[k] - hf.data()[t * 4 + k]).abs() < 1e-14);
            }
        }
        let mut state = LstmState::zeros(1, 4);
        for t in (0..5).rev() {
            let xt = Tensor::from_vec(&[1, 3], x.at(0, t).to_vec()).unwrap();
            state = lstm_step(&xt, &state, &p.reverse).unwrap();
            for k in 0..4 {
                assert!((state.h.data()[k] - hr.data()[t * 4 + k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_step_directions_coincide_with_shared_params() {
        let mut rng = Rng::new(5);
        let fwd = random_lstm(&mut rng, 3, 2);
        let p = BiLstmParams {
            forward: fwd.clone(),
            reverse: fwd,
        };
        let x = random_seq(&mut rng, &[1], 1, 3);
        let (hf, hr, _) = bilstm_forward(&x, &p).unwrap();
        assert_eq!(hf, hr);
    }

    #[test]
    fn padding_is_carried_through() {
        let mut rng = Rng::new(6);
        let p = BiLstmParams {
            forward: random_lstm(&mut rng, 2, 3),
            reverse: random_lstm(&mut rng, 2, 3),
        };
        let padded = random_seq(&mut rng, &[3, 5], 5, 2);
        let (hf, hr, _) = bilstm_forward(&padded, &p).unwrap();
        // Emitted states at padded steps are zero.
        for t in 3..5 {
            for k in 0..3 {
                assert_eq!(hf.data()[(t) * 3 + k], 0.0);
                assert_eq!(hr.data()[(t) * 3 + k], 0.0);
            }
        }
        // Same document alone.
        let alone = SeqActivation {
            values: Tensor::from_vec(&[1, 3, 2], padded.values.data()[..6].to_vec()).unwrap(),
            mask: Mask::from_lengths(&[3], 3),
        };
        let (af, ar, _) = bilstm_forward(&alone, &p).unwrap();
        for i in 0..9 {
            assert!((af.data()[i] - hf.data()[i]).abs() < 1e-12);
            assert!((ar.data()[i] - hr.data()[i]).abs() < 1e-12);
        }
        let batched = last_state_readout(&hf, &hr, &padded.mask).unwrap();
        let single = last_state_readout(&af, &ar, &alone.mask).unwrap();
        assert_eq!(&batched.data()[..6], single.data());
        // Forward half is the state at step 3, not at the padded end.
        assert_eq!(&batched.data()[..3], &hf.data()[6..9]);
    }

    #[test]
    fn readout_shape_and_empty_rows() {
        let hf: Tensor = Tensor::zeros(&[1, 4, 2]);
        let out = last_state_readout(&hf, &hf, &Mask::from_lengths(&[4], 4)).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        assert!(last_state_readout(&hf, &hf, &Mask::from_lengths(&[0], 4)).is_err());
        let p: BiLstmParams = BiLstmParams {
            forward: LstmParams::zeros(2, 2),
            reverse: LstmParams::zeros(2, 2),
        };
        let x = SeqActivation {
            values: Tensor::zeros(&[2, 3, 2]),
            mask: Mask::from_lengths(&[3, 0], 3),
        };
        assert!(bilstm_forward(&x, &p).is_err());
    }

    #[test]
    fn reversing_input_swaps_directions() {
        let mut rng = Rng::new(8);
        let p = BiLstmParams {
            forward: random_lstm(&mut rng, 3, 4),
            reverse: random_lstm(&mut rng, 3, 4),
        };
        let x = random_seq(&mut rng, &[6, 6], 6, 3);
        let mut rev_vals = x.values.clone();
        for b in 0..2 {
            for t in 0..6 {
                for k in 0..3 {
                    rev_vals.data_mut()[(b * 6 + t) * 3 + k] = x.values.data()[(b * 6 + 5 - t) * 3 + k];
                }
            }
        }
        let xr = SeqActivation {
            values: rev_vals,
            mask: x.mask.clone(),
        };
        let swapped = BiLstmParams {
            forward: p.reverse.clone(),
            reverse: p.forward.clone(),
        };
        let (hf, hr, _) = bilstm_forward(&x, &p).unwrap();
        let (sf, sr, _) = bilstm_forward(&xr, &swapped).unwrap();
        for b in 0..2 {
            for t in 0..6 {
                for k in 0..4 {
                    let a = (b * 6 + t) * 4 + k;
                    let m = (b * 6 + 5 - t) * 4 + k;
                    assert!((hf.data()[a] - sr.data()[m]).abs() < 1e-12);
                    assert!((hr.data()[a] - sf.data()[m]).abs() < 1e-12);
                }
            }
        }
    }

    /// Central differences over every parameter entry and input, h = 1e-5.
    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let p = BiLstmParams {
            forward: random_lstm(&mut rng, 3, 4),
            reverse: random_lstm(&mut rng, 3, 4),
        };
        let x = random_seq(&mut rng, &[4, 2], 4, 3);
        let wf: Tensor = sample_uniform(&mut rng, &[2, 4, 4], -1.0, 1.0).unwrap();
        let wr: Tensor = sample_uniform(&mut rng, &[2, 4, 4], -1.0, 1.0).unwrap();
        let wo: Tensor = sample_uniform(&mut rng, &[2, 8], -1.0, 1.0).unwrap();
        let loss = |p: &BiLstmParams, x: &SeqActivation| {
            let (hf, hr, _) = bilstm_forward(x, p).unwrap();
            let ro = last_state_readout(&hf, &hr, &x.mask).unwrap();
            let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
            dot(&hf, &wf) + dot(&hr, &wr) + dot(&ro, &wo)
        };
        let (hf, hr, cache) = bilstm_forward(&x, &p).unwrap();
        let _ = (hf, hr);
        let (mut df, mut dr) = last_state_readout_backward(&wo, &x.mask, 4).unwrap();
        df.add_assign(&wf).unwrap();
        dr.add_assign(&wr).unwrap();
        // Emitted values at masked steps are constant zero.
        for b in 0..2 {
            for t in x.mask.lengths()[b]..4 {
                for k in 0..4 {
                    df.data_mut()[(b * 4 + t) * 4 + k] = 0.0;
                    dr.data_mut()[(b * 4 + t) * 4 + k] = 0.0;
                }
            }
        }
        let mut grads = p.zeros_like();
        let dx = bilstm_backward(&x, &p, &cache, &df, &dr, &mut grads).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for dir in 0..2 {
            for ti in 0..12 {
                let n = {
                    let src = if dir == 0 { &p.forward } else { &p.reverse };
                    src.tensors()[ti].len()
                };
                for e in 0..n {
                    let mut q = p.clone();
                    let t = &mut (if dir == 0 { &mut q.forward } else { &mut q.reverse }).tensors_mut()[ti];
                    t.data_mut()[e] += h;
                    let up = loss(&q, &x);
                    let t = &mut (if dir == 0 { &mut q.forward } else { &mut q.reverse }).tensors_mut()[ti];
                    t.data_mut()[e] -= 2.0 * h;
                    let num = (up - loss(&q, &x)) / (2.0 * h);
                    let g = if dir == 0 { &grads.forward } else { &grads.reverse };
                    let ana = g.tensors()[ti].data()[e];
                    assert!(rel(ana, num) < 1e-4, "dir {dir} {} [{e}]: {ana} vs {num}", LSTM_TENSOR_NAMES[ti]);
                }
            }
        }
        for i in 0..x.values.len() {
            let (b, t) = (i / 12, (i / 3) % 4);
            if !x.mask.get(b, t) {
                continue;
            }
            let mut xp = x.clone();
            xp.values.data_mut()[i] += h;
            let up = loss(&p, &xp);
            xp.values.data_mut()[i] -= 2.0 * h;
            let num = (up - loss(&p, &xp)) / (2.0 * h);
            assert!(rel(dx.data()[i], num) < 1e-4, "dx[{i}]: {} vs {num}", dx.data()[i]);
        }
    }
}
