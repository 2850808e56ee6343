//! Dense N-way tensors and the mode operations HOSVD is built from.
//!
//! Storage is row-major: the last index varies fastest. A 2-way tensor and a
//! [`Matrix`] therefore share the exact same data layout, and converting
//! between them only moves the buffer.
//!
//! Mode-k matricization puts mode k on the rows. Columns enumerate the
//! remaining modes in increasing mode order with the *lowest* remaining mode
//! varying fastest. Under this ordering the unfolding of a Tucker product is
//!
//! ```text
//! A_(k) = C(k) · B_(k) · (C(N) ⊗ … ⊗ C(k+1) ⊗ C(k-1) ⊗ … ⊗ C(1))ᵀ
//! ```
//!
//! with the Kronecker chain in descending mode order.
//!
//! All public interfaces use 1-indexed modes, so `mode = 1` is the first axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};

/// Dense N-way array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Dense row-major matrix. Exactly a 2-way [`Tensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Anything with a shape and a flat buffer of values.
pub trait Dense {
    fn dims(&self) -> Vec<usize>;
    fn values(&self) -> &[f64];
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor needs at least one mode"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in storage order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            increment(&mut idx, shape);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    /// Flat offset of a 0-indexed multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }
}

impl Dense for Tensor {
    fn dims(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Advances a row-major multi-index by one position.
fn increment(idx: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

fn frobenius(data: &[f64]) -> f64 {
    data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix extents must be positive, got {rows}x{cols}")));
        }
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Leading `n` columns.
    pub fn first_columns(&self, n: usize) -> Matrix {
        assert!(n <= self.cols);
        Matrix::from_fn(self.rows, n, |i, j| self.get(i, j))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self.view().t(), other.view(), 0.0, &mut out.data);
        Ok(out)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }

    pub(crate) fn view(&self) -> View<'_> {
        View::row_major(&self.data, self.rows, self.cols)
    }
}

impl Dense for Matrix {
    fn dims(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    fn values(&self) -> &[f64] {
        &self.data
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Tensor {
        Tensor {
            shape: vec![m.rows, m.cols],
            data: m.data,
        }
    }
}

impl TryFrom<Tensor> for Matrix {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Matrix> {
        match *t.shape {
            [rows, cols] => Ok(Matrix {
                rows,
                cols,
                data: t.data,
            }),
            _ => Err(Error::invalid(format!(
                "expected a 2-way tensor, got shape {:?}",
                t.shape
            ))),
        }
    }
}

fn check_mode(shape: &[usize], mode: usize) -> Result<usize> {
    if mode == 0 || mode > shape.len() {
        return Err(Error::invalid(format!(
            "mode {mode} out of range for a {}-way tensor",
            shape.len()
        )));
    }
    Ok(mode - 1)
}

/// Column strides of the mode-k unfolding, indexed by tensor axis. The entry
/// for axis `k` itself is zero.
fn unfolding_strides(shape: &[usize], k: usize) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (axis, &extent) in shape.iter().enumerate() {
        if axis != k {
            strides[axis] = acc;
            acc *= extent;
        }
    }
    strides
}

/// Mode-k unfolding of `t` (1-indexed `mode`).
pub fn matricize(t: &Tensor, mode: usize) -> Result<Matrix> {
    let k = check_mode(&t.shape, mode)?;
    let rows = t.shape[k];
    let cols = t.data.len() / rows;
    let strides = unfolding_strides(&t.shape, k);
    let mut out = vec![0.0; t.data.len()];
    let mut idx = vec![0usize; t.shape.len()];
    for &value in &t.data {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[idx[k] * cols + col] = value;
        increment(&mut idx, &t.shape);
    }
    Matrix::new(rows, cols, out)
}

/// Inverse of [`matricize`]: rebuilds a tensor of `shape` from its mode-k unfolding.
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
    check_shape(shape)?;
    let k = check_mode(shape, mode)?;
    let total: usize = shape.iter().product();
    if m.rows != shape[k] || m.rows * m.cols != total {
        return Err(Error::invalid(format!(
            "{}x{} matrix cannot fold into shape {shape:?} at mode {mode}",
            m.rows, m.cols
        )));
    }
    let strides = unfolding_strides(shape, k);
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(m.data[idx[k] * m.cols + col]);
        increment(&mut idx, shape);
    }
    Tensor::new(shape.to_vec(), data)
}

/// Mode-k product `t ×_k m`: every mode-k fiber of `t` is multiplied by `m`.
pub fn mode_product(t: &Tensor, m: &Matrix, mode: usize) -> Result<Tensor> {
    let k = check_mode(&t.shape, mode)?;
    if m.cols != t.shape[k] {
        return Err(Error::invalid(format!(
            "mode-{mode} product needs a matrix with {} columns, got {}x{}",
            t.shape[k], m.rows, m.cols
        )));
    }
    let unfolded = matricize(t, mode)?;
    let product = m.matmul(&unfolded)?;
    let mut shape = t.shape.clone();
    shape[k] = m.rows;
    fold(&product, mode, &shape)
}

/// Kronecker product with block structure `a[i, j] · b`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut data = vec![0.0; rows * cols];
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.get(i, j);
            for p in 0..b.rows {
                let row = (i * b.rows + p) * cols + j * b.cols;
                for q in 0..b.cols {
                    data[row + q] = aij * b.get(p, q);
                }
            }
        }
    }
    Matrix { rows, cols, data }
}
