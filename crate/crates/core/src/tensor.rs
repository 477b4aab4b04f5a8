//! Dense row-major tensors over f32 (training) or f64 (gradient checking).

use std::fmt;

use crate::error::{Error, Result};

/// Scalar element abstraction. f32 is the default compute type; f64 exists
/// for finite-difference gradient checks.
pub trait Float:
    Copy + Clone + PartialEq + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite_v(self) -> bool;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Float for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn powf(self, e: Self) -> Self {
        f32::powf(self, e)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f32::min(self, o)
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
}

impl Float for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f64::min(self, o)
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
}

/// Rank-N dense tensor, row-major. `dims == []` denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    dims: Vec<usize>,
    data: Vec<E>,
}

pub fn numel_of(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<E: Float> Tensor<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel_of(&dims) != data.len() {
            return Err(Error::Shape(format!(
                "tensor dims {:?} imply {} elements, got {}",
                dims,
                numel_of(&dims),
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![E::ZERO; numel_of(dims)],
        }
    }

    pub fn full(dims: &[usize], v: E) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; numel_of(dims)],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = numel_of(dims);
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<E>) {
        (self.dims, self.data)
    }

    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() requires a scalar, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self> {
        if numel_of(&dims) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.dims,
                self.data.len(),
                dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<F: Float>(&self) -> Tensor<F> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_v())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff dims differ");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Mirror along the last axis (width for CHW / BCHW layouts).
    pub fn flip_last_axis(&self) -> Self {
        let w = *self.dims.last().expect("flip needs rank >= 1");
        let rows = self.numel() / w.max(1);
        let mut out = self.data.clone();
        for r in 0..rows {
            let base = r * w;
            out[base..base + w].reverse();
        }
        Tensor {
            dims: self.dims.clone(),
            data: out,
        }
    }
}

/// Row-major strides for `dims`.
pub fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_len() {
        let r = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn scalar_has_empty_dims() {
        let t = Tensor::<f32>::scalar(2.5);
        assert_eq!(t.dims(), &[] as &[usize]);
        assert_eq!(t.item().unwrap(), 2.5);
    }

    #[test]
    fn flip_last_axis_is_involution() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let back = t.flip_last_axis().flip_last_axis();
        assert_eq!(t, back);
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }
}
