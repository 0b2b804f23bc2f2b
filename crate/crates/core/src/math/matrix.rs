//! Row-major single precision matrices and the handful of kernels the rest
//! of the crate is built on.
//!
//! Every reduction runs in a fixed order, so the same inputs always produce
//! bit-identical outputs regardless of how callers split or schedule work.

use crate::error::{shape_err, Error, Result};

/// Default threshold below which a row is treated as having zero norm.
pub const NORM_EPSILON: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(shape_err(format!("row {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Contiguous block of rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows, "row block out of range");
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[DenseMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols != cols {
                return Err(shape_err(format!("vstack of {} and {} columns", cols, p.cols)));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[DenseMatrix]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(shape_err("hstack of matrices with different row counts"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Columns `start..end` of every row.
    pub fn col_block(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols, "column block out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!(
                "add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f32 {
        sum_of_squares(&self.data).sqrt()
    }
}

/// Inner product with a fixed eight-lane accumulation order.
///
/// The lanes are folded pairwise in a fixed pattern and the tail is added
/// sequentially, so the result only depends on the inputs.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn sum_of_squares(a: &[f32]) -> f32 {
    dot(a, a)
}

/// `out += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `a · b`, or `a · bᵀ` when `transpose_b` is set.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix, transpose_b: bool) -> Result<DenseMatrix> {
    if transpose_b {
        if a.cols != b.cols {
            return Err(shape_err(format!(
                "{:?} x {:?}^T: inner dimensions differ",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            let ar = a.row(i);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(ar, b.row(j));
            }
        }
        Ok(out)
    } else {
        if a.cols != b.rows {
            return Err(shape_err(format!(
                "{:?} x {:?}: inner dimensions differ",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..a.cols {
                let aik = a.data[i * a.cols + k];
                if aik != 0.0 {
                    axpy(aik, b.row(k), orow);
                }
            }
        }
        Ok(out)
    }
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(shape_err(format!(
            "{:?}^T x {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let brow = b.row(i);
        for c in 0..a.cols {
            let v = a.data[i * a.cols + c];
            if v != 0.0 {
                axpy(v, brow, out.row_mut(c));
            }
        }
    }
    Ok(out)
}

/// Row-wise L2 normalization. Also returns the original row norms, which the
/// backward pass needs.
pub fn l2_normalize_rows_with_norms(
    m: &DenseMatrix,
    epsilon: f32,
) -> Result<(DenseMatrix, Vec<f32>)> {
    if m.is_empty() {
        return Err(shape_err("cannot normalize an empty matrix"));
    }
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let n = sum_of_squares(row).sqrt();
        if !(n >= epsilon) {
            return Err(Error::ZeroNormRow(r));
        }
        let inv = 1.0 / n;
        for v in row.iter_mut() {
            *v *= inv;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

pub fn l2_normalize_rows(m: &DenseMatrix, epsilon: f32) -> Result<DenseMatrix> {
    l2_normalize_rows_with_norms(m, epsilon).map(|(n, _)| n)
}

/// Gradient of row normalization: for `u = v / |v|`,
/// `dL/dv = (g - (g·u) u) / |v|`.
pub fn l2_normalize_backward(
    normalized: &DenseMatrix,
    norms: &[f32],
    grad_normalized: &DenseMatrix,
) -> Result<DenseMatrix> {
    if normalized.shape() != grad_normalized.shape() || norms.len() != normalized.rows {
        return Err(shape_err("normalization backward shapes disagree"));
    }
    let mut out = grad_normalized.clone();
    for r in 0..normalized.rows {
        let u = normalized.row(r);
        let g = out.row_mut(r);
        let gu = dot(g, u);
        let inv = 1.0 / norms[r];
        for (gi, ui) in g.iter_mut().zip(u) {
            *gi = (*gi - gu * ui) * inv;
        }
    }
    Ok(out)
}

/// Single-row variant used when only a few rows take part in an update.
pub fn l2_normalize_backward_row(u: &[f32], norm: f32, g: &[f32], out: &mut [f32]) {
    let gu = dot(g, u);
    let inv = 1.0 / norm;
    for ((o, gi), ui) in out.iter_mut().zip(g).zip(u) {
        *o = (gi - gu * ui) * inv;
    }
}
