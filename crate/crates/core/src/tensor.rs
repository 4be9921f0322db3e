//! Minimal dense N-dimensional float arrays.
//!
//! [`Tensor`] is the currency of every layer: a shape plus a flat row-major
//! buffer of `f32` (training/inference) or `f64` (gradient checking). There
//! is no broadcasting and no autodiff; layers write their own gradients.
//!
//! Reductions ([`Tensor::l2_distance`], sums) accumulate in `f64` regardless
//! of the element type so that 32-bit storage does not poison the
//! finite-difference tolerances downstream.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar element of a [`Tensor`]: `f32` for training and inference, `f64`
/// for gradient checking.
pub trait Element:
    Copy
    + Clone
    + PartialEq
    + PartialOrd
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    /// Fused multiply-add `self * a + b` (single rounding).
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn max_of(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Elementwise tanh over a slice. The `f32` implementation uses a
    /// branch-free exp2 polynomial (relative error under 1e-6) that the
    /// compiler can vectorize; `f64` keeps the libm call for full
    /// precision, which is what gradient checking relies on.
    fn tanh_slice(input: &[Self], out: &mut [Self]) {
        for (o, &x) in out.iter_mut().zip(input) {
            *o = x.tanh();
        }
    }
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    #[inline(always)]
    fn max_of(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn tanh_slice(input: &[Self], out: &mut [Self]) {
        for (o, &x) in out.iter_mut().zip(input) {
            *o = fast_tanh_f32(x);
        }
    }
}

/// Branch-free tanh: `(e^{2x} - 1) / (e^{2x} + 1)` with `e^{2x}` via a
/// range-reduced exp2 polynomial. Exact at 0, saturates for `|x| > 9`,
/// relative error below 1e-6 in between.
#[inline(always)]
fn fast_tanh_f32(x: f32) -> f32 {
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    const LN_2: f32 = std::f32::consts::LN_2;
    let z = (2.0 * x).clamp(-18.0, 18.0);
    let z2 = z * LOG2_E;
    let n = (z2 + 0.5).floor();
    let y = (z2 - n) * LN_2;
    // Degree-6 Taylor polynomial of e^y for |y| <= ln(2)/2.
    let p = 1.0
        + y * (1.0
            + y * (0.5
                + y * (1.0 / 6.0 + y * (1.0 / 24.0 + y * (1.0 / 120.0 + y * (1.0 / 720.0))))));
    let scale = f32::from_bits((((n as i32) + 127) << 23) as u32);
    let t = scale * p;
    (t - 1.0) / (t + 1.0)
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    #[inline(always)]
    fn max_of(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::EmptyShape);
    }
    if let Some(&bad) = shape.iter().find(|&&d| d == 0) {
        let _ = bad;
        return Err(Error::invalid(format!(
            "shape entries must be >= 1, got {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::ElementCountOverflow(shape.to_vec()))
}

impl<E: Element> Tensor<E> {
    /// Tensor of the given shape filled with a constant.
    pub fn filled(shape: &[usize], value: E) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, E::ZERO)
    }

    /// Tensor with elements drawn uniformly from `[lo, hi)`.
    ///
    /// The generator is consumed once per element in row-major order, so a
    /// given seed always produces the same tensor.
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let len = checked_len(shape)?;
        let data = (0..len)
            .map(|_| E::from_f64(rng.uniform(lo, hi)))
            .collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Wraps an existing buffer; the length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {len} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements into {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Flattens to one dimension.
    pub fn flatten(self) -> Self {
        let len = self.data.len();
        Tensor {
            shape: vec![len],
            data: self.data,
        }
    }

    pub fn fill(&mut self, value: E) {
        self.data.fill(value);
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element at a multi-dimensional index (row-major). Test helper; hot
    /// paths index the flat buffer directly.
    pub fn at(&self, index: &[usize]) -> E {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} ({dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: element {i} of shape {:?} is {:?}",
                    self.shape, v
                )));
            }
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// Euclidean distance between two tensors of equal shape.
    ///
    /// The squared differences are accumulated in f64 before the final
    /// square root.
    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "l2_distance over {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(l2_distance_slice(&self.data, &other.data))
    }
}

/// Euclidean distance between two equal-length slices, f64 accumulation.
pub fn l2_distance_slice<E: Element>(a: &[E], b: &[E]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    acc.sqrt()
}
