use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{LabError, Result};

/// Row-major dense matrix of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat64 {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(LabError::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Mat64 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LabError::LengthMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat64 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat64 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Mat64 {
        Mat64::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: f64) -> Mat64 {
        Mat64 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat64) -> Mat64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat64 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        for (r, o) in out.iter_mut().enumerate() {
            *o = super::dot(self.row(r), x);
        }
    }

    /// `self^T * x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat64::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, b) in out.row_mut(r).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest column L2 norm.
    pub fn max_column_norm(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Mat64) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every entry strictly above the diagonal is exactly zero.
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|r| self.row(r).iter().skip(r + 1).all(|v| *v == 0.0))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Square, nonnegative and every row summing to one within `tol`.
    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.is_square()
            && self.data.iter().all(|v| *v >= 0.0 && v.is_finite())
            && self.row_sums().iter().all(|s| (s - 1.0).abs() <= tol)
    }

    /// Spectral norm (largest singular value) by power iteration on `A^T A`.
    ///
    /// Stops after `max_iter` steps or once the relative change of the
    /// estimate drops below `tol`. The estimate approaches the true value
    /// from below.
    pub fn spectral_norm(&self, max_iter: usize, tol: f64) -> f64 {
        if self.data.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        // Non-uniform start so the iterate is not orthogonal to structured
        // singular vectors.
        let mut x: Vec<f64> = (0..self.cols)
            .map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_75).fract())
            .collect();
        normalize(&mut x);
        let mut sigma = 0.0;
        for _ in 0..max_iter {
            let ax = self.matvec(&x);
            let mut next = self.matvec_t(&ax);
            let norm = super::l2_norm(&next);
            if norm == 0.0 {
                return super::l2_norm(&ax);
            }
            next.iter_mut().for_each(|v| *v /= norm);
            let estimate = norm.sqrt();
            let converged = (estimate - sigma).abs() <= tol * estimate;
            sigma = estimate;
            x = next;
            if converged {
                break;
            }
        }
        super::l2_norm(&self.matvec(&x)).max(sigma)
    }

    /// Dominant eigenvalue magnitude of a nonnegative square matrix by power
    /// iteration with max-norm normalisation, starting from the ones vector.
    pub fn dominant_eigenvalue(&self, max_iter: usize, tol: f64) -> f64 {
        self.dominant_eigenvalue_from(vec![1.0; self.cols], max_iter, tol)
    }

    /// [`Self::dominant_eigenvalue`] from a caller-supplied start vector.
    pub fn dominant_eigenvalue_from(&self, start: Vec<f64>, max_iter: usize, tol: f64) -> f64 {
        assert!(self.is_square());
        assert_eq!(start.len(), self.cols);
        let mut x = start;
        let mut lambda = 0.0;
        for _ in 0..max_iter {
            let y = self.matvec(&x);
            let norm = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if norm == 0.0 {
                return 0.0;
            }
            let converged = (norm - lambda).abs() <= tol * norm;
            lambda = norm;
            x = y.into_iter().map(|v| v / norm).collect();
            if converged {
                break;
            }
        }
        lambda
    }

    /// Solves `self * x = b` by Gaussian elimination with partial pivoting.
    ///
    /// Fails with a contract error if a pivot falls below `1e-13` times the
    /// largest entry.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if !self.is_square() || b.len() != self.rows {
            return Err(LabError::contract("solve needs a square system"));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut rhs = b.to_vec();
        let threshold = 1e-13 * a.max_abs().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .expect("non-empty range");
            if a[(pivot, col)].abs() <= threshold {
                return Err(LabError::contract("singular system"));
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                }
                rhs.swap(pivot, col);
            }
            let p = a[(col, col)];
            for r in col + 1..n {
                let factor = a[(r, col)] / p;
                if factor == 0.0 {
                    continue;
                }
                for c in col..n {
                    let v = a[(col, c)];
                    a[(r, c)] -= factor * v;
                }
                rhs[r] -= factor * rhs[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let tail: f64 = (r + 1..n).map(|c| a[(r, c)] * x[c]).sum();
            x[r] = (rhs[r] - tail) / a[(r, r)];
        }
        Ok(x)
    }
}

fn normalize(x: &mut [f64]) {
    let n = super::l2_norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

impl Index<(usize, usize)> for Mat64 {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat64 {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}
