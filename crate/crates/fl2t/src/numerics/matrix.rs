//! Dense row-major matrix with deterministic arithmetic.
//!
//! Every reduction (matrix product, norm, softmax denominator) runs in a
//! fixed index order, so identical inputs produce bitwise-identical outputs
//! across runs and platforms. That determinism is load-bearing: training
//! reproducibility tests compare checkpoints byte for byte.

use crate::error::{Fl2tError, Result};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Dense matrix of `f64` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Matrix of zeros.
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a flat row-major buffer.
    ///
    /// Fails if the buffer length does not equal `rows * cols` or any entry
    /// is NaN/infinite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Fl2tError::Domain(format!(
                "matrix buffer has {} entries, expected {}x{} = {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("from_vec")?;
        Ok(m)
    }

    /// Build from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Fl2tError::Domain(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    c
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows as owned vectors (used by the JSON checkpoint format).
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`, checking shapes.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Fl2tError::Shape {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(self.mul_unchecked(other))
    }

    /// `self * other` where shapes are guaranteed by construction.
    ///
    /// Accumulates over the inner index in ascending order for every output
    /// entry, which pins the floating-point result.
    pub(crate) fn mul_unchecked(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows, "mul_unchecked shape violation");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// `self^T * other` without materializing the transpose.
    pub(crate) fn tmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, other.rows, "tmul shape violation");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub(crate) fn mul_t(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.cols, "mul_t shape violation");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        Ok(out)
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o -= b;
        }
        Ok(out)
    }

    /// In-place `self += scale * other`; shapes guaranteed by caller.
    pub(crate) fn add_scaled_assign(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (o, b) in self.data.iter_mut().zip(&other.data) {
            *o += scale * b;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    /// Frobenius norm, accumulating squared entries in storage order.
    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Squared Frobenius norm (same accumulation order as the norm).
    pub fn frobenius_norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc
    }

    /// Sum of `self[i][j] * other[i][j]` in storage order.
    pub fn inner(&self, other: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        acc
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(Fl2tError::Numerical(format!(
                "{op} produced a non-finite entry at flat index {idx}"
            ))),
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Fl2tError::Shape {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Dot product of two equal-length vectors, accumulated left to right.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

/// Euclidean norm of a vector.
pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Fails with a domain error when either vector has zero norm: the angle is
/// undefined there and silently returning 0 would hide upstream collapse.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Fl2tError::Shape {
            op: "cosine_sim",
            left_rows: 1,
            left_cols: u.len(),
            right_rows: 1,
            right_cols: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Fl2tError::Domain(
            "cosine similarity of a zero-norm vector is undefined".into(),
        ));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row-wise softmax with max-subtraction for overflow safety.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mut max = f64::NEG_INFINITY;
        for v in row.iter() {
            if *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
