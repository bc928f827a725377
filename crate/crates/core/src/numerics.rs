//! Dense matrix arithmetic, the temperature softmax and the activation
//! functions everything else is assembled from.
//!
//! All values are `f64`, immutable after construction, and bounded by a
//! configurable magnitude cap so downstream blocks can budget their error
//! terms against a known input scale.

use crate::error::{Error, Result};

/// Default bound on the magnitude of any matrix entry.
pub const DEFAULT_ENTRY_BOUND: f64 = 1e6;

/// Dense row-major matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, checking finiteness and the default entry bound.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_bound(rows, cols, data, DEFAULT_ENTRY_BOUND)
    }

    /// Builds a matrix with a caller-chosen entry bound.
    pub fn with_bound(rows: usize, cols: usize, data: Vec<f64>, bound: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeError(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeError(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite entry {v} at flat index {i}"
                )));
            }
            if v.abs() > bound {
                return Err(Error::InvalidInput(format!(
                    "entry {v} at flat index {i} exceeds magnitude bound {bound}"
                )));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds from nested rows; panics on ragged input in tests only.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeError("ragged row lengths".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Row slice view.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column extracted as a vector.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Plain numeric product; also serves as the oracle the attention-based
    /// multiplication block is checked against.
    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeError(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// Plain numeric transpose; the oracle for the transpose block.
    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeError("add: shape mismatch".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute difference against another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeError("diff: shape mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Singular values by one-sided Jacobi rotations, descending order.
    ///
    /// Stable and plenty fast for the small dense matrices used here.
    pub fn singular_values(&self) -> Vec<f64> {
        // Work on the taller orientation so columns are the short axis.
        let work = if self.rows >= self.cols {
            self.clone()
        } else {
            self.transposed()
        };
        let n = work.cols;
        let m = work.rows;
        let mut cols: Vec<Vec<f64>> = (0..n).map(|c| work.col(c)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for _sweep in 0..60 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    let app = dot(&cols[p], &cols[p]);
                    let aqq = dot(&cols[q], &cols[q]);
                    let apq = dot(&cols[p], &cols[q]);
                    off = off.max(apq.abs());
                    if apq.abs() <= 1e-30 * (app * aqq).sqrt().max(1e-300) {
                        continue;
                    }
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let vp = cols[p][i];
                        let vq = cols[q][i];
                        cols[p][i] = c * vp - s * vq;
                        cols[q][i] = s * vp + c * vq;
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
        }
        let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }
}

/// Softmax inverse temperature; strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    lambda: f64,
}

impl Temperature {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Leaky-ReLU slope, constrained to (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakyAlpha {
    alpha: f64,
}

impl LeakyAlpha {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Column-wise softmax with inverse temperature `t`.
///
/// Each column of the score matrix is normalized into a probability vector;
/// the per-column max is subtracted before exponentiation, which leaves the
/// result unchanged but prevents overflow at large lambda.
pub fn temp_softmax(scores: &Matrix, t: Temperature) -> Result<Matrix> {
    if !scores.is_finite() {
        return Err(Error::InvalidInput("softmax scores must be finite".into()));
    }
    let lambda = t.lambda();
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for c in 0..scores.cols() {
        let mut max = f64::NEG_INFINITY;
        for r in 0..scores.rows() {
            max = max.max(scores.get(r, c));
        }
        let mut sum = 0.0;
        for r in 0..scores.rows() {
            let e = (lambda * (scores.get(r, c) - max)).exp();
            out.set(r, c, e);
            sum += e;
        }
        for r in 0..scores.rows() {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    Ok(out)
}

/// Elementwise ReLU.
pub fn relu(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows(),
        cols: x.cols(),
        data: x.data().iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Elementwise leaky ReLU: `x` for `x >= 0`, `alpha * x` otherwise.
pub fn leaky_relu(x: &Matrix, a: LeakyAlpha) -> Matrix {
    let alpha = a.alpha();
    Matrix {
        rows: x.rows(),
        cols: x.cols(),
        data: x
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { alpha * v })
            .collect(),
    }
}

/// Exact inverse of the leaky ReLU: `y` for `y >= 0`, `y / alpha` otherwise.
pub fn leaky_relu_inverse(y: &Matrix, a: LeakyAlpha) -> Matrix {
    let alpha = a.alpha();
    Matrix {
        rows: y.rows(),
        cols: y.cols(),
        data: y
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { v / alpha })
            .collect(),
    }
}

/// Scalar leaky ReLU, shared by the task generators.
pub fn leaky_relu_scalar(x: f64, a: LeakyAlpha) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a.alpha() * x
    }
}
