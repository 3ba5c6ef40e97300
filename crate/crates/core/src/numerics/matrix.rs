//! Row-major dense matrices of 64-bit floats.
//!
//! Everything in this crate computes in f64; file formats quantize to f32 on
//! write. Shapes are checked at the operation boundaries and reported as
//! [`Error::Shape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `rows x cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: n, cols, data })
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Returns the listed rows as a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    /// Concatenates columns of `self` and `other` row by row.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "hcat row mismatch: {} vs {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.row_mut(i)[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Copies a column range into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let mut out = Matrix::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// `x · Wᵀ + b`, with `self` of shape `n x in`, `w` of shape `out x in`.
    ///
    /// This is the layout of a linear layer: each output entry is the dot
    /// product of an input row with a weight row, both contiguous.
    pub fn linear(&self, w: &Matrix, b: &[f64]) -> Result<Matrix> {
        if self.cols != w.cols {
            return Err(Error::Shape(format!(
                "linear: input width {} vs weight width {}",
                self.cols, w.cols
            )));
        }
        if b.len() != w.rows {
            return Err(Error::Shape(format!(
                "linear: bias length {} vs weight rows {}",
                b.len(),
                w.rows
            )));
        }
        let mut out = Matrix::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let x = self.row(i);
            let o = out.row_mut(i);
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(x, w.row(j)) + b[j];
            }
        }
        Ok(out)
    }

    /// `self · W`, with `self` of shape `n x out`, `w` of shape `out x in`.
    ///
    /// Used by backprop to push deltas through a layer: `dX = dY · W`.
    pub fn matmul(&self, w: &Matrix) -> Result<Matrix> {
        if self.cols != w.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} vs {}x{}",
                self.rows, self.cols, w.rows, w.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            let y = self.row(i);
            let o = out.row_mut(i);
            for (j, &yj) in y.iter().enumerate() {
                if yj != 0.0 {
                    axpy(yj, w.row(j), o);
                }
            }
        }
        Ok(out)
    }

    /// Error if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {context}")))
        }
    }
}

/// Dot product of two equally long slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Euclidean norm of a slice.
#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
