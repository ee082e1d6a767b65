//! Dense row-major f64 tensors. Values are immutable once built; every op
//! in the crate produces a fresh tensor. Reductions and matrix products
//! accumulate in f64 so small graphs stay finite-difference checkable.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// numpy-style broadcast of `b`'s shape against `a`'s (right-aligned).
/// Returns per-dim strides into `b` for iterating over `a`'s index space,
/// or an error if the shapes are incompatible. `b` may not exceed `a`.
pub fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return Err(Error::Dim(format!(
            "broadcast: {:?} has higher rank than {:?}",
            b_shape, a_shape
        )));
    }
    let b_strides = strides_of(b_shape);
    let offset = a_shape.len() - b_shape.len();
    let mut out = vec![0usize; a_shape.len()];
    for i in 0..b_shape.len() {
        let (ad, bd) = (a_shape[offset + i], b_shape[i]);
        if bd == ad {
            out[offset + i] = b_strides[i];
        } else if bd == 1 {
            out[offset + i] = 0;
        } else {
            return Err(Error::Dim(format!(
                "broadcast mismatch: {:?} vs {:?} at dim {}",
                a_shape, b_shape, i
            )));
        }
    }
    Ok(out)
}

/// C = A (ta) * B (tb) with f64 accumulation. A is m x k, B is k x n after
/// the optional transposes; dims given post-transpose.
pub fn matmul_f64(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] } as f64;
            if av == 0.0 {
                continue;
            }
            if tb {
                // B is n x k stored; row j of B^T is column of B
                for j in 0..n {
                    acc[j] += av * b[j * k + p] as f64;
                }
            } else {
                let row = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    acc[j] += av * row[j] as f64;
                }
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f64;
        }
    }
}
