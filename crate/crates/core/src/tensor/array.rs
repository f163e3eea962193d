//! Dense row-major n-dimensional array. This is deliberately a thin value
//! type: all differentiable computation goes through the tape, and raw
//! kernels operate on the flat data slices directly.

use super::scalar::Scalar;
use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    /// Array of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Array { shape: shape.to_vec(), data: vec![T::ZERO; shape.iter().product()] }
    }

    /// Array filled with a constant.
    pub fn full(shape: &[usize], value: T) -> Self {
        Array { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    /// Rank-0 array holding a single value.
    pub fn scalar(value: T) -> Self {
        Array { shape: vec![], data: vec![value] }
    }

    /// Build from an explicit buffer; the buffer length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, buffer has {}", shape, numel, data.len()),
            ));
        }
        Ok(Array { shape: shape.to_vec(), data })
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: T) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::sample_normal(rng) * std).collect();
        Array { shape: shape.to_vec(), data }
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: T, hi: T) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| lo + T::sample_uniform(rng) * (hi - lo)).collect();
        Array { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element array.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on array with {} elements", self.data.len());
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} elements) -> {:?} ({})", self.shape, self.data.len(), shape, numel),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Elementwise map into a new array.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// In-place elementwise addition; shapes must match exactly.
    pub fn add_in_place(&mut self, other: &Array<T>) {
        assert_eq!(self.shape, other.shape, "add_in_place shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// In-place scale by a constant.
    pub fn scale_in_place(&mut self, c: T) {
        for v in self.data.iter_mut() {
            *v *= c;
        }
    }

    /// Sum of all elements, accumulated in f64 for shape-independent results.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// Mean of all elements (0 for an empty array).
    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_f64() / self.data.len() as f64
        }
    }

    /// Largest absolute element (0 for an empty array).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }

    /// Convert elements to another scalar type through f64.
    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Array::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn reshape_preserves_data() {
        let a = Array::<f32>::from_vec(&[2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let b = a.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.data(), a.data());
        assert!(a.clone().reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn cast_round_trips() {
        let a = Array::<f32>::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap();
        let b: Array<f64> = a.cast();
        let c: Array<f32> = b.cast();
        assert_eq!(a, c);
    }
}
