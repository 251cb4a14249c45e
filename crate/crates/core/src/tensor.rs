//! Dense row-major arrays and the seedable random stream.
//!
//! Everything is double precision during training. `f32` tensors exist only so
//! that inference can run in single precision; the conversion goes through
//! [`Tensor::cast`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Real: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
    Max,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // Same value as 1/(1+exp(-x)); the split avoids exp overflow for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

impl UnaryOp {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => relu(x),
        }
    }
}

impl BinaryOp {
    #[inline]
    pub fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => {
                if b > a {
                    b
                } else {
                    a
                }
            }
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::Parameter(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    /// Panics on a zero extent; use [`Tensor::from_vec`] for untrusted shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("zero extent");
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access. Reserved for optimizer updates and gradient accumulation.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all extents after the first.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }

    /// `self · other` for `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// `self · otherᵀ` for `[m×k] · [n×k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a, b);
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// `selfᵀ · other` for `[k×m]ᵀ · [k×n]`.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = other.dims2("matmul_tn")?;
        if k != k2 {
            return Err(Error::dim("matmul_tn", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn unary(&self, op: UnaryOp) -> Tensor<T> {
        self.map(|v| op.apply(v))
    }

    /// Elementwise binary op; a one-element `other` broadcasts as a scalar.
    pub fn binary(&self, op: BinaryOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        if other.data.len() == 1 {
            let s = other.data[0];
            return Ok(self.map(|v| op.apply(v, s)));
        }
        if self.shape != other.shape {
            return Err(Error::dim(op_name(op), &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op.apply(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Max, other)
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(UnaryOp::Relu)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Mul => "mul",
        BinaryOp::Max => "max",
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// Seedable generator: ChaCha8, a counter-based stream cipher generator.
///
/// Streams are identical across runs and platforms for a given `(seed, stream)`
/// pair, which is what checkpoints record.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

pub const RNG_ALGORITHM: &str = "chacha8";

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream of `seed`, e.g. one per epoch or per example.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn sample_uniform<T: Real>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
    if !(lo < hi) {
        return Err(Error::Parameter(format!("uniform bounds need lo < hi, got [{lo}, {hi})")));
    }
    let n = check_shape(shape)?;
    let data = (0..n).map(|_| T::of(lo + (hi - lo) * rng.uniform())).collect();
    Tensor::from_vec(shape, data)
}

/// Entries are 1 with probability `p`, else 0.
pub fn sample_bernoulli<T: Real>(rng: &mut Rng, shape: &[usize], p: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("bernoulli p must lie in [0, 1], got {p}")));
    }
    let n = check_shape(shape)?;
    let data = (0..n)
        .map(|_| if rng.uniform() < p { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        Tensor::from_vec(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i: Tensor = Tensor::identity(2);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_5x7_by_7x3_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a: Tensor = sample_uniform(&mut rng, &[5, 7], -1.0, 1.0).unwrap();
        let b: Tensor = sample_uniform(&mut rng, &[7, 3], -1.0, 1.0).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = naive(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a: Tensor = Tensor::zeros(&[2, 3]);
        let b: Tensor = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = Rng::new(3);
        let a: Tensor = sample_uniform(&mut rng, &[4, 6], -1.0, 1.0).unwrap();
        let b: Tensor = sample_uniform(&mut rng, &[5, 6], -1.0, 1.0).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        let want = naive(&a, &b.transpose().unwrap());
        for (x, y) in nt.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c: Tensor = sample_uniform(&mut rng, &[4, 3], -1.0, 1.0).unwrap();
        let tn = a.matmul_tn(&c).unwrap();
        let want = naive(&a.transpose().unwrap(), &c);
        for (x, y) in tn.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_definitions() {
        assert_eq!(UnaryOp::Tanh.apply(0.0f64), 0.0);
        assert_eq!(UnaryOp::Sigmoid.apply(0.0f64), 0.5);
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 2.0]);
        let y = Tensor::from_vec(&[2], vec![3.0, 1.0]).unwrap();
        assert_eq!(x.maximum(&y).unwrap().data(), &[3.0, 2.0]);
        assert_eq!(x.add(&y).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(x.mul(&y).unwrap().data(), &[-3.0, 2.0]);
        let s = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        assert_eq!(x.mul(&s).unwrap().data(), &[-2.0, 4.0]);
        assert!(x.add(&Tensor::zeros(&[3])).is_err());
        // Large-magnitude sigmoid stays finite and saturates.
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f64>::from_vec(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn bernoulli_edges_and_mean() {
        let mut rng = Rng::new(0);
        let z: Tensor = sample_bernoulli(&mut rng, &[100], 0.0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o: Tensor = sample_bernoulli(&mut rng, &[100], 1.0).unwrap();
        assert!(o.data().iter().all(|&v| v == 1.0));
        let h: Tensor = sample_bernoulli(&mut rng, &[1_000_000], 0.5).unwrap();
        let mean = h.sum() / 1e6;
        assert!((0.498..=0.502).contains(&mean), "{mean}");
        assert!(sample_bernoulli::<f64>(&mut rng, &[2], 1.5).is_err());
        assert!(sample_uniform::<f64>(&mut rng, &[2], 1.0, 1.0).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let a: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut s1 = Rng::with_stream(42, 1);
        let mut s2 = Rng::with_stream(42, 2);
        assert_ne!(s1.next_u64(), s2.next_u64());
    }

    #[test]
    fn rng_stream_is_pinned() {
        // Frozen from a first run; a change here invalidates every stored seed.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let mut again = Rng::new(0);
        assert_eq!(first, again.next_u64());
        assert_eq!(format!("{first:016x}"), PINNED_FIRST_WORD);
    }

    const PINNED_FIRST_WORD: &str = "b585f767a79a3b6c";

    proptest! {
        #[test]
        fn matmul_matches_naive(m in 1usize..32, k in 1usize..32, n in 1usize..32, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a: Tensor = sample_uniform(&mut rng, &[m, k], -1.0, 1.0).unwrap();
            let b: Tensor = sample_uniform(&mut rng, &[k, n], -1.0, 1.0).unwrap();
            let got = a.matmul(&b).unwrap();
            let want = naive(&a, &b);
            for (x, y) in got.data().iter().zip(want.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn elementwise_is_pure(v in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
            let t = Tensor::from_vec(&[v.len()], v).unwrap();
            for op in [UnaryOp::Tanh, UnaryOp::Sigmoid, UnaryOp::Relu] {
                let a = t.unary(op);
                let b = t.unary(op);
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
