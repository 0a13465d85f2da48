//! Minimal dense linear algebra: a row-major matrix and a growable Cholesky
//! factor. Conditioning sets only ever grow by blocks as observations append,
//! so the factor supports pushing rows and truncating back, which keeps every
//! posterior update at O(n^2) per appended row instead of refactoring.

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
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
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| dot(self.row(i), x))
            .collect()
    }

    /// y = A^T x, accepting x shorter than `rows` (missing entries are zero).
    /// The planner exploits this: most-likely data extends the whitened
    /// observation vector with exact zeros, which are never materialized.
    pub fn transpose_mul_vec_padded(&self, x: &[f64]) -> Vec<f64> {
        debug_assert!(x.len() <= self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let r = self.row(i);
                for (o, &rij) in out.iter_mut().zip(r) {
                    *o += xi * rij;
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Reported when a pivot collapses during factorization.
#[derive(Debug, Clone, Copy)]
pub struct FactorBreakdown {
    /// Index of the failing pivot row.
    pub pivot: usize,
    /// Value of the failed diagonal residual.
    pub residual: f64,
}

/// Lower-triangular Cholesky factor with packed row storage. Rows can be
/// appended (extending the factored matrix by one row/column) and truncated,
/// which is how the planner backtracks along macro-action prefixes.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    /// Packed rows: row i occupies i+1 entries starting at i*(i+1)/2.
    rows: Vec<f64>,
}

impl Cholesky {
    pub fn empty() -> Self {
        Cholesky {
            n: 0,
            rows: Vec::new(),
        }
    }

    /// Factor a full symmetric matrix given by a lookup closure.
    pub fn factor(n: usize, sym: impl Fn(usize, usize) -> f64) -> Result<Self, FactorBreakdown> {
        let mut c = Cholesky::empty();
        let mut cov = Vec::with_capacity(n);
        for i in 0..n {
            cov.clear();
            cov.extend((0..i).map(|j| sym(i, j)));
            c.push_row(&cov, sym(i, i))?;
        }
        Ok(c)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.rows[start..start + i + 1]
    }

    #[inline]
    pub fn diag(&self, i: usize) -> f64 {
        self.rows[i * (i + 1) / 2 + i]
    }

    /// Append one row: `cov_prev[j] = A[n][j]` for existing indices j, and
    /// `var = A[n][n]`. O(n^2).
    pub fn push_row(&mut self, cov_prev: &[f64], var: f64) -> Result<(), FactorBreakdown> {
        debug_assert_eq!(cov_prev.len(), self.n);
        let i = self.n;
        let mut new_row = Vec::with_capacity(i + 1);
        // Forward substitution against the existing rows.
        for j in 0..i {
            let lj = self.row(j);
            let s = cov_prev[j] - dot(&new_row[..j], &lj[..j]);
            new_row.push(s / lj[j]);
        }
        let residual = var - dot(&new_row, &new_row);
        if !(residual > 0.0) || !residual.is_finite() {
            return Err(FactorBreakdown { pivot: i, residual });
        }
        new_row.push(residual.sqrt());
        self.rows.extend_from_slice(&new_row);
        self.n += 1;
        Ok(())
    }

    /// Append rows whose factor entries are already known: `w_cols` holds the
    /// solved off-diagonal block (n_old x m, column k = L^{-1} cross_k) and
    /// `psi` the m x m lower factor of the Schur complement. Used when the
    /// posterior covariance factor of a macro-action has been computed anyway
    /// and equals the factor's new diagonal block.
    pub fn push_block_solved(&mut self, w_cols: &Matrix, psi: &Matrix) {
        let m = psi.rows();
        debug_assert_eq!(w_cols.cols(), m);
        debug_assert_eq!(w_cols.rows(), self.n);
        let n0 = self.n;
        for r in 0..m {
            for i in 0..n0 {
                self.rows.push(w_cols.at(i, r));
            }
            for j in 0..=r {
                self.rows.push(psi.at(r, j));
            }
            self.n += 1;
        }
    }

    /// Shrink back to `n` rows (inverse of push operations).
    pub fn truncate(&mut self, n: usize) {
        debug_assert!(n <= self.n);
        self.rows.truncate(n * (n + 1) / 2);
        self.n = n;
    }

    /// In-place forward substitution: solve L y = x.
    pub fn solve_lower_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let r = self.row(i);
            let s = x[i] - dot(&x[..i], &r[..i]);
            x[i] = s / r[i];
        }
    }

    /// In-place backward substitution: solve L^T y = x.
    pub fn solve_transpose_in_place(&self, x: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for j in i + 1..self.n {
                s -= self.row(j)[i] * x[j];
            }
            x[i] = s / self.row(i)[i];
        }
    }

    /// Solve (L L^T) y = x.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        self.solve_lower_in_place(x);
        self.solve_transpose_in_place(x);
    }

    /// y = L x.
    pub fn mul_lower(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let r = self.row(i);
                dot(r, &x[..i + 1])
            })
            .collect()
    }

    /// log det of the factored matrix: 2 sum log diag(L).
    pub fn logdet(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.diag(i).ln()).sum()
    }

    /// Unpack into a dense lower-triangular matrix.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let r = self.row(i);
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        m
    }
}
