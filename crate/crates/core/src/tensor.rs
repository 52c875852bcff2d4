//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: it never carries gradient state. Gradients
//! live on a [`crate::tape::Tape`], keyed by the [`crate::tape::Var`] handle a
//! tensor receives when it is recorded.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: (0..numel).map(&mut f).collect() }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Validation(format!("ragged rows: expected {cols} columns, found {}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::new([rows.len(), cols], data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, low: f64, high: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(low, high).expect("uniform bounds");
        Self::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("normal std");
        Self::from_fn(shape, |_| dist.sample(rng))
    }

    /// Xavier/Glorot uniform initialization for a `fan_in × fan_out` matrix.
    pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform([fan_in, fan_out], -bound, bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Row `i` of the last-dimension slices (`numel / last_dim` rows total).
    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        (self.shape == other.shape)
            .then(|| self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

/// Row-major matrix product kernels on raw slices.
///
/// `c` is accumulated into, never overwritten.
pub(crate) mod gemm {
    fn check(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &[f64]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    }

    /// `c[m×n] += a[m×k] · b[k×n]`
    pub fn nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        check(m, k, n, a, b, c);
        // SAFETY: the bounds above cover every element addressed by the strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// `c[m×n] += a[m×k] · b[n×k]ᵀ`
    pub fn nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        check(m, k, n, a, b, c);
        // SAFETY: as in `nn`; `b` is read through transposed strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                1,
                k as isize,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// `c[m×n] += a[k×m]ᵀ · b[k×n]`
    pub fn tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        check(m, k, n, a, b, c);
        // SAFETY: as in `nn`; `a` is read through transposed strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                1,
                m as isize,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
