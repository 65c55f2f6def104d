//! Dense row-major tensors, the seeded generator, and the PDT1 file format.

mod pdt;
mod rng;

pub use pdt::{decode_pdt, encode_pdt, read_pdt, write_pdt, PDT_MAGIC};
pub use rng::{mix_seed, Rng};

use crate::error::{Error, Result};

/// A dense N-dimensional array of `f64` in row-major order (last axis fastest).
///
/// An empty shape is a scalar holding exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= isize::MAX as usize / std::mem::size_of::<f64>())
        .ok_or_else(|| Error::Shape(format!("element count of {shape:?} overflows")))
}

impl Tensor {
    /// Builds a tensor of `shape` with every element set to `fill`.
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Same shape as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        ravel(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    /// Reinterprets the data under a new shape of equal length.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|x| x + c)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        Ok(self.sum() / self.data.len() as f64)
    }

    /// Population variance (divides by N).
    ///
    /// Two passes over values shifted by the first element, so a constant
    /// tensor gives exactly 0.
    pub fn variance(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Domain("variance of an empty tensor".into()));
        }
        let n = self.data.len() as f64;
        let x0 = self.data[0];
        let mean = self.data.iter().map(|&x| x - x0).sum::<f64>() / n;
        let ss: f64 = self.data.iter().map(|&x| (x - x0 - mean) * (x - x0 - mean)).sum();
        Ok(ss / n)
    }

    pub fn max(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("{what} contains NaN or infinite values")))
        }
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "expected shape {shape:?}, found {:?}",
                self.shape
            )))
        }
    }
}

/// Fills `shape` with i.i.d. Normal(0, sigma²) draws from `rng`.
pub fn gaussian_init(shape: &[usize], sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut t = Tensor::zeros(shape)?;
    if sigma > 0.0 {
        for x in t.data_mut() {
            *x = sigma * rng.normal();
        }
    }
    Ok(t)
}

/// Population variance of all elements.
pub fn tensor_variance(t: &Tensor) -> Result<f64> {
    t.variance()
}

/// Row-major flat offset of `index` within `shape`.
pub fn ravel(shape: &[usize], index: &[usize]) -> Result<usize> {
    if shape.len() != index.len() {
        return Err(Error::Shape(format!(
            "index {index:?} has rank {}, shape {shape:?} has rank {}",
            index.len(),
            shape.len()
        )));
    }
    let mut off = 0;
    for (&i, &d) in index.iter().zip(shape) {
        if i >= d {
            return Err(Error::Shape(format!("index {index:?} out of bounds for {shape:?}")));
        }
        off = off * d + i;
    }
    Ok(off)
}

/// Inverse of [`ravel`].
pub fn unravel(shape: &[usize], mut offset: usize) -> Result<Vec<usize>> {
    let len = checked_len(shape)?;
    if offset >= len {
        return Err(Error::Shape(format!("offset {offset} out of bounds for {shape:?}")));
    }
    let mut index = vec![0; shape.len()];
    for (slot, &d) in index.iter_mut().zip(shape).rev() {
        *slot = offset % d;
        offset /= d;
    }
    Ok(index)
}
