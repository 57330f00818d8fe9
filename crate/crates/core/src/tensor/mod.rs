//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything the transformer stack needs lives here: the [`Tensor`] value
//! type, the [`Float`] scalar abstraction (so gradient checks can run in
//! 64-bit while models are stored in 32-bit), the [`Tape`] that records
//! differentiable primitives, and a handful of plain helpers used at
//! inference time.
//!
//! Every kernel computes each output row from its own inputs only, with a
//! fixed reduction order. A row therefore has the same bits whether it was
//! computed alone, in a batch, or incrementally against a KV cache.

mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result};

pub use kernels::{dot, matmul_nn_acc, matmul_nt, matmul_tn_acc};
pub use tape::{AttentionShape, Tape, Var};

/// Scalar types the engine is instantiated for (`f32` storage, `f64` checks).
pub trait Float:
    num_traits::Float + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Name written into checkpoint manifests and diagnostics.
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Float for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense row-major tensor.
///
/// Invariant: `shape.iter().product() == data.len()`. A zero-dimensional
/// shape denotes a scalar holding one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Float> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[S]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from nested rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::of(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Float>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        if k != k2 {
            return Err(dim_err!("matmul inner dims {} vs {}", k, k2));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nn_acc(m, k, n, &self.data, &other.data, &mut out);
        Self::new(vec![m, n], out)
    }

    /// Transpose of a matrix.
    ///
    /// # Panics
    /// If the tensor is not 2-D.
    pub fn transpose(&self) -> Self {
        let (m, n) = self.as_matrix().expect("transpose needs a matrix");
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            out.extend((0..m).map(|i| self.data[i * n + j]));
        }
        Self { shape: vec![n, m], data: out }
    }

    pub(crate) fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(dim_err!("expected a matrix, got shape {:?}", s)),
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<S: Float>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logits / temperature)`, or a one-hot at the argmax when the
/// temperature is zero.
pub fn softmax<S: Float>(logits: &[S], temperature: f64) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    if logits.is_empty() {
        return out;
    }
    if temperature <= 0.0 {
        out[argmax(logits)] = S::one();
        return out;
    }
    let inv_t = S::of(1.0 / temperature);
    softmax_into(logits, inv_t, &mut out);
    out
}

/// Row softmax shared by the tape op and the plain helper so both produce
/// identical bits.
#[inline]
pub(crate) fn softmax_into<S: Float>(logits: &[S], inv_t: S, out: &mut [S]) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) * inv_t).exp();
        sum = sum + *o;
    }
    let inv = S::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}
