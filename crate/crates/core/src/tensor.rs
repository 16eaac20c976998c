//! Dense row-major matrices and the decompositions every solver builds on.
//!
//! Decompositions are computed in double precision. Singular value and
//! symmetric eigen decompositions are delegated to `faer` and then
//! normalised to descending order.

use std::fmt;
use std::ops::{Index, IndexMut};

use faer::{Mat, Side};

use crate::error::{Error, Result};

/// Iteration cap handed to the iterative decompositions.
pub const MAX_DECOMPOSITION_ITERS: usize = 10_000;

/// Relative tolerance on `max |R - R^T|` accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues below `PINV_CUTOFF * max eigenvalue` are treated as zero by
/// the inverse square root.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Default relative damping added to autocorrelation matrices.
pub const DEFAULT_DAMPING: f64 = 1e-6;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                write!(f, "{:>12.5e} ", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::InvalidLength {
                    rows: n_rows,
                    cols: n_cols,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(n_rows, n_cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                row: i / self.cols.max(1),
                col: i % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `||self - rhs||_F / ||rhs||_F`, or the absolute error when `rhs` is zero.
    pub fn relative_error(&self, reference: &Self) -> f64 {
        let diff = self.sub(reference).expect("relative_error shape").frobenius();
        let norm = reference.frobenius();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                m = m.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        m
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| 0.5 * (self[(r, c)] + self[(c, r)]))
    }

    pub fn column_norms_sq(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v * v;
            }
        }
        out
    }

    pub fn row_norms_sq(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v * v).sum())
            .collect()
    }

    /// Rows `start..end`, all columns.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows);
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end`, all rows.
    pub fn col_block(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols);
        Self::from_fn(self.rows, end - start, |r, c| self[(r, start + c)])
    }

    pub fn select_columns(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.cols) {
            return Err(Error::InvalidArgument(format!(
                "column index {bad} out of range for {} columns",
                self.cols
            )));
        }
        Ok(Self::from_fn(self.rows, idx.len(), |r, c| self[(r, idx[c])]))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {} rows",
                self.rows
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn vstack(blocks: &[Self]) -> Result<Self> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "vstack",
                    left: (rows, cols),
                    right: b.shape(),
                });
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn hstack(blocks: &[Self]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::ShapeMismatch {
                op: "hstack",
                left: (rows, 0),
                right: b.shape(),
            });
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Scales column `j` by `s[j]`.
    pub fn scale_columns(&self, s: &[f64]) -> Self {
        assert_eq!(s.len(), self.cols);
        Self::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * s[c])
    }

    /// Scales row `i` by `s[i]`.
    pub fn scale_rows(&self, s: &[f64]) -> Self {
        assert_eq!(s.len(), self.rows);
        Self::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * s[r])
    }

    pub(crate) fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |r, c| self[(r, c)])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `A = U diag(S) Vt`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `m x k` with orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative, length `k = min(m, n)`.
    pub s: Vec<f64>,
    /// `k x n` with orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_columns(&self.s)
            .matmul(&self.vt)
            .expect("svd factor shapes are consistent")
    }
}

fn check_nonempty(a: &Matrix) -> Result<()> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::EmptyMatrix {
            rows: a.rows,
            cols: a.cols,
        });
    }
    Ok(())
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    check_nonempty(a)?;
    a.check_finite()?;
    let decomposed = a.to_faer().thin_svd().map_err(|_| Error::NoConvergence {
        op: "svd",
        rows: a.rows,
        cols: a.cols,
        iterations: MAX_DECOMPOSITION_ITERS,
    })?;
    let (u, v) = (decomposed.U(), decomposed.V());
    let sv = decomposed.S().column_vector();
    let k = a.rows.min(a.cols);
    // faer returns descending values; re-sort so the contract does not hinge on that.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        sv[j]
            .partial_cmp(&sv[i])
            .expect("finite singular values")
            .then(i.cmp(&j))
    });
    let s = order.iter().map(|&i| sv[i].max(0.0)).collect();
    let u = Matrix::from_fn(a.rows, k, |r, c| u[(r, order[c])]);
    let vt = Matrix::from_fn(k, a.cols, |r, c| v[(c, order[r])]);
    Ok(SvdFactors { u, s, vt })
}

/// Best rank-`r` approximation `A ~ Ar * Br` with the singular values folded
/// into the right factor: `Ar = U[:, :r]`, `Br = diag(S[:r]) Vt[:r, :]`.
pub fn truncated_svd(a: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    check_nonempty(a)?;
    let max = a.rows.min(a.cols);
    if r < 1 || r > max {
        return Err(Error::InvalidRank { rank: r, min: 1, max });
    }
    let f = svd(a)?;
    Ok(split_factors(&f, r))
}

pub(crate) fn split_factors(f: &SvdFactors, r: usize) -> (Matrix, Matrix) {
    let left = f.u.col_block(0, r);
    let right = f.vt.row_block(0, r).scale_rows(&f.s[..r]);
    (left, right)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigenFactors {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: Matrix,
}

pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigenFactors> {
    check_nonempty(a)?;
    if !a.is_square() {
        return Err(Error::ShapeMismatch {
            op: "symmetric_eigen",
            left: a.shape(),
            right: a.shape(),
        });
    }
    a.check_finite()?;
    let n = a.rows;
    let eig = a
        .symmetrized()
        .to_faer()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::NoConvergence {
            op: "symmetric_eigen",
            rows: n,
            cols: n,
            iterations: MAX_DECOMPOSITION_ITERS,
        })?;
    let values = eig.S().column_vector();
    let vecs = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });
    let vectors = Matrix::from_fn(n, n, |r, c| vecs[(r, order[c])]);
    Ok(SymmetricEigenFactors {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors,
    })
}

/// Symmetric square root and (pseudo-)inverse square root of a damped
/// positive semidefinite matrix, sharing one eigendecomposition.
#[derive(Debug, Clone)]
pub struct PsdRoots {
    pub sqrt: Matrix,
    pub inv_sqrt: Matrix,
    /// Eigenvalues of the damped matrix, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
}

/// `R + damping * mean(diag(R)) * I`.
pub fn damped(r: &Matrix, damping: f64) -> Matrix {
    let n = r.rows;
    let shift = damping * r.trace() / n as f64;
    let mut out = r.clone();
    for i in 0..n {
        out[(i, i)] += shift;
    }
    out
}

pub fn psd_roots(r: &Matrix, damping: f64) -> Result<PsdRoots> {
    check_nonempty(r)?;
    if !r.is_square() {
        return Err(Error::ShapeMismatch {
            op: "psd_roots",
            left: r.shape(),
            right: r.shape(),
        });
    }
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "damping must be finite and non-negative, got {damping}"
        )));
    }
    r.check_finite()?;
    let asym = r.max_asymmetry();
    if asym > SYMMETRY_TOL * r.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    let eig = symmetric_eigen(&damped(r, damping))?;
    let top = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let neg_tol = SYMMETRY_TOL * top;
    if let Some(&bad) = eig.values.iter().find(|&&v| v < -neg_tol) {
        return Err(Error::NegativeEigenvalue { eigenvalue: bad });
    }
    let values: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let cutoff = PINV_CUTOFF * values[0];
    let sqrt_vals: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
    let inv_vals: Vec<f64> = values
        .iter()
        .map(|&v| if v > cutoff && v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
        .collect();
    let v = &eig.vectors;
    let sqrt = v.scale_columns(&sqrt_vals).matmul_t(v)?.symmetrized();
    let inv_sqrt = v.scale_columns(&inv_vals).matmul_t(v)?.symmetrized();
    Ok(PsdRoots {
        sqrt,
        inv_sqrt,
        eigenvalues: values,
    })
}

/// Unique symmetric PSD square root of `R + damping * mean(diag(R)) * I`.
pub fn psd_sqrt(r: &Matrix, damping: f64) -> Result<Matrix> {
    psd_roots(r, damping).map(|p| p.sqrt)
}

/// Pseudo-inverse of [`psd_sqrt`], zeroing numerically null directions.
pub fn psd_inv_sqrt(r: &Matrix, damping: f64) -> Result<Matrix> {
    psd_roots(r, damping).map(|p| p.inv_sqrt)
}

/// Lower Cholesky factor `L` with `A = L L^T`, for strictly positive
/// definite `A`. Kept separate from the eigen path so samplers built on it
/// are independent of [`psd_sqrt`].
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    check_nonempty(a)?;
    if !a.is_square() {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            left: a.shape(),
            right: a.shape(),
        });
    }
    a.check_finite()?;
    let llt = a
        .symmetrized()
        .to_faer()
        .llt(Side::Lower)
        .map_err(|_| Error::InvalidArgument("matrix is not positive definite".into()))?;
    let l = llt.L();
    Ok(Matrix::from_fn(a.rows, a.cols, |r, c| if c <= r { l[(r, c)] } else { 0.0 }))
}
