//! Dense row-major tensors and the raw kernels behind them.
//!
//! Values are always held as `f64`. A `F32` tensor stores values that are
//! exactly representable in single precision; every kernel result is rounded
//! back to `f32` before it is stored, so persisting such a tensor as `f32`
//! is lossless.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Element width in bytes.
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub(crate) fn round_all(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Identity of a trainable tensor, used to route gradients back from a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Box<Tensor>>,
    id: Option<ParamId>,
    version: u64,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape).field("dtype", &self.dtype);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad).finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.dtype == other.dtype && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        dtype.round_all(&mut data);
        Ok(Self::raw(shape.to_vec(), data, dtype))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            dtype,
            data,
            requires_grad: false,
            grad: None,
            id: None,
            version: 0,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(Vec::new(), vec![v], DType::F64)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![v; n], DType::F64)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Matrix with entries `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::raw(vec![rows, cols], data, DType::F64)
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

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access to the values. Bumps the version counter.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.data
    }

    /// Monotone counter of in-place modifications.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != self.data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let mut data = self.data.clone();
        dtype.round_all(&mut data);
        Self::raw(self.shape.clone(), data, dtype)
    }

    /// Same values, detached from any parameter identity or gradient.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.shape.clone(), self.data.clone(), self.dtype)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor trainable (or frozen). Enabling gives the tensor a
    /// fresh parameter identity.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            self.id = Some(ParamId::fresh());
        } else {
            self.grad = None;
        }
    }

    pub fn into_param(mut self) -> Tensor {
        self.set_requires_grad(true);
        self
    }

    pub fn param_id(&self) -> Option<ParamId> {
        if self.requires_grad {
            self.id
        } else {
            None
        }
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                expected: self.data.len(),
                actual: g.len(),
            });
        }
        let dtype = self.dtype;
        match &mut self.grad {
            Some(existing) => {
                for (e, v) in existing.data.iter_mut().zip(g) {
                    *e = dtype.round(*e + v);
                }
            }
            None => {
                let mut data = g.to_vec();
                dtype.round_all(&mut data);
                self.grad = Some(Box::new(Tensor::raw(self.shape.clone(), data, dtype)));
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::raw(vec![c, r], out, self.dtype))
    }

    /// Column `j` of a matrix.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.cols();
        (0..self.rows()).map(|i| self.data[i * c + j]).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Non-differentiable matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        check_matmul(self, other)?;
        let (m, n, p) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * p];
        matmul_acc(&self.data, &other.data, &mut out, m, n, p);
        self.dtype.round_all(&mut out);
        Ok(Tensor::raw(vec![m, p], out, self.dtype))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor::raw(self.shape.clone(), data, self.dtype))
    }
}

pub(crate) fn check_matmul(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    if a.dtype != b.dtype {
        return Err(Error::DTypeMismatch {
            op: "matmul",
            lhs: a.dtype,
            rhs: b.dtype,
        });
    }
    Ok(())
}

/// `c += a · b` for row-major `a: m×n`, `b: n×p`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * p..(l + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×p`, `b: n×p`, `c: m×n`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for l in 0..n {
            c[i * n + l] += dot(a_row, &b[l * p..(l + 1) * p]);
        }
    }
}

/// `c += aᵀ · b` for `a: m×n`, `b: m×p`, `c: n×p`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for l in 0..n {
            let a_il = a[i * n + l];
            if a_il == 0.0 {
                continue;
            }
            let c_row = &mut c[l * p..(l + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
        assert_eq!(Tensor::new(&[0, 3], vec![]).unwrap().numel(), 0);
    }

    #[test]
    fn f32_values_are_rounded_on_creation() {
        let t = Tensor::with_dtype(&[1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn eager_matmul_hand_example() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        let err = a.matmul(&Tensor::zeros(&[3, 1])).unwrap_err();
        assert!(err.to_string().contains("[2, 2]") && err.to_string().contains("[3, 1]"));
    }

    #[test]
    fn transposed_kernels_agree_with_plain_product() {
        let a = Tensor::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.3 - 1.0);
        let b = Tensor::from_fn(5, 4, |i, j| ((i + 2 * j) % 7) as f64 - 2.5);
        let c = a.matmul(&b).unwrap();
        let bt = b.transpose().unwrap();
        let mut nt = vec![0.0; 12];
        matmul_nt_acc(a.data(), bt.data(), &mut nt, 3, 5, 4);
        let at = a.transpose().unwrap();
        let mut tn = vec![0.0; 12];
        matmul_tn_acc(at.data(), b.data(), &mut tn, 5, 3, 4);
        for k in 0..12 {
            assert!((nt[k] - c.data()[k]).abs() < 1e-12);
            assert!((tn[k] - c.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn data_mut_bumps_version() {
        let mut t = Tensor::zeros(&[2]);
        let v = t.version();
        t.data_mut()[0] = 1.0;
        assert!(t.version() > v);
    }
}
