//! Dense row-major f64 tensors.
//!
//! Values are immutable once built through the public constructors, which
//! reject non-finite data; every public operation re-checks its output so
//! NaN/Inf never propagates silently.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating that the shape matches the data length and
    /// that all values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor constructor".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let shape = vec![data.len()];
        Tensor::new(shape, data)
    }

    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Tensor::new(vec![r, c], rows.into_iter().flatten().collect())
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// 2-D row count. Panics on non-matrices.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    /// 2-D column count. Panics on non-matrices.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    /// Contiguous slice for index `i` along the first axis.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let per_row: usize = self.shape[1..].iter().product();
        &self.data[i * per_row..(i + 1) * per_row]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    fn check_finite(self, op: &str) -> Result<Tensor> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.into()))
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Dimension(format!(
                "matmul needs matrices, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        if self.cols() != other.rows() {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let out = kernels::matmul(self, other);
        out.check_finite("matmul")
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 || self.is_empty() {
            return Err(Error::Dimension(format!(
                "softmax needs a non-empty vector, got {:?}",
                self.shape
            )));
        }
        let mut out = vec![0.0; self.len()];
        kernels::softmax_into(&self.data, &mut out);
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
        .check_finite("softmax")
    }

    /// Overflow-safe log(sum(exp(x))) over a rank-1 tensor.
    pub fn logsumexp(&self) -> Result<f64> {
        if self.rank() != 1 || self.is_empty() {
            return Err(Error::Dimension(format!(
                "logsumexp needs a non-empty vector, got {:?}",
                self.shape
            )));
        }
        let v = kernels::logsumexp(&self.data);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("logsumexp".into()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
        .check_finite("add")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Shared compute kernels. These operate on raw buffers and do not validate;
/// callers are responsible for shapes.
pub(crate) mod kernels {
    use super::Tensor;

    /// c[m x n] = a[m x k] . b[k x n]
    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Tensor::from_raw(vec![m, n], out)
    }

    /// c[m x n] = a[m x k] . b[n x k]^T
    pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Tensor::from_raw(vec![m, n], out)
    }

    /// c[k x n] = a[m x k]^T . b[m x n]
    pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let brow = &b.data[i * n..(i + 1) * n];
            for p in 0..k {
                let av = arow[p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Tensor::from_raw(vec![k, n], out)
    }

    /// out[r] = m[r x c] . v[c]
    pub fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
        let (r, c) = (m.shape[0], m.shape[1]);
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = m.data[i * c..(i + 1) * c]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum();
        }
        out
    }

    /// out[c] = m[r x c]^T . v[r]
    pub fn matvec_t(m: &Tensor, v: &[f64]) -> Vec<f64> {
        let (r, c) = (m.shape[0], m.shape[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            let row = &m.data[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] += vi * row[j];
            }
        }
        out
    }

    pub fn logsumexp(xs: &[f64]) -> f64 {
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
        max + sum.ln()
    }

    pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, x) in out.iter_mut().zip(xs) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}
