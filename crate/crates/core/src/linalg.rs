//! Dense, deterministic f64 linear algebra: Cholesky factorisation with a
//! jitter ladder, triangular solves, log-determinants, quadratic forms and
//! diagonal-block traces of the inverse.
//!
//! Everything is row-major and unblocked. Target matrices stay below
//! 5000x5000 so no sparsity or parallelism is needed.

use crate::error::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// C = A * B.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        // ikj order keeps the inner loop contiguous
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

    /// y = A * x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut m = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }

    /// A += s * B, elementwise.
    pub fn add_scaled(&mut self, other: &DenseMatrix, s: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    /// A + diag(d).
    pub fn add_diag(&self, d: &[f64]) -> DenseMatrix {
        assert_eq!(self.rows, self.cols);
        assert_eq!(self.rows, d.len());
        let mut m = self.clone();
        for i in 0..self.rows {
            m.data[i * self.cols + i] += d[i];
        }
        m
    }
}

/// Lower-triangular Cholesky factor of M + jitter*I.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: DenseMatrix,
    pub jitter: f64,
}

fn try_cholesky(m: &DenseMatrix, jitter: f64) -> Option<DenseMatrix> {
    let n = m.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Factorise a symmetric PSD matrix, climbing a decade jitter ladder
/// {0, 1e-10, 1e-9, ...} up to `max_jitter` until the factorisation succeeds.
pub fn cholesky(m: &DenseMatrix, max_jitter: f64) -> Result<CholeskyFactor> {
    if m.rows != m.cols {
        return Err(Error::NotSquare { rows: m.rows, cols: m.cols });
    }
    let sym_tol = 1e-10 * (1.0 + m.max_abs());
    let asym = m.max_asymmetry();
    if asym > sym_tol {
        return Err(Error::NotSymmetric { max_asym: asym });
    }
    let mut jitter = 0.0f64;
    loop {
        if let Some(lower) = try_cholesky(m, jitter) {
            return Ok(CholeskyFactor { lower, jitter });
        }
        let next = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if next > max_jitter {
            return Err(Error::NotPositiveDefinite { max_jitter });
        }
        jitter = next;
    }
}

/// log det(M + jitter*I) = 2 * sum_i ln L_ii.
pub fn log_det_psd(c: &CholeskyFactor) -> f64 {
    let n = c.lower.rows;
    let mut acc = 0.0;
    for i in 0..n {
        acc += c.lower.get(i, i).ln();
    }
    2.0 * acc
}

fn forward_sub(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l.get(i, k) * x[k];
        }
        x[i] = acc / l.get(i, i);
    }
    x
}

fn backward_sub_t(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    // solves L^T x = b
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for k in (i + 1)..n {
            acc -= l.get(k, i) * x[k];
        }
        x[i] = acc / l.get(i, i);
    }
    x
}

/// Solve (M + jitter*I) x = b for a single right-hand side.
pub fn solve_vec(c: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>> {
    let n = c.lower.rows;
    if b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.len() });
    }
    let y = forward_sub(&c.lower, b);
    Ok(backward_sub_t(&c.lower, &y))
}

/// Solve (M + jitter*I) X = B columnwise.
pub fn solve(c: &CholeskyFactor, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = c.lower.rows;
    if b.rows != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.rows });
    }
    let mut out = DenseMatrix::zeros(b.rows, b.cols);
    let mut col = vec![0.0; n];
    for j in 0..b.cols {
        for i in 0..n {
            col[i] = b.get(i, j);
        }
        let x = solve_vec(c, &col)?;
        for i in 0..n {
            out.set(i, j, x[i]);
        }
    }
    Ok(out)
}

/// v^T (M + jitter*I)^{-1} v via one triangular solve: ||L^{-1} v||^2.
pub fn quadratic_form(v: &[f64], c: &CholeskyFactor) -> Result<f64> {
    let n = c.lower.rows;
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    let y = forward_sub(&c.lower, v);
    Ok(y.iter().map(|x| x * x).sum())
}

/// Diagonal of (M + jitter*I)^{-1}, as sum of squared entries of the
/// columns of L^{-T}.
pub fn inverse_diagonal(c: &CholeskyFactor) -> Vec<f64> {
    let n = c.lower.rows;
    let mut diag = vec![0.0; n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        // column j of L^{-1}: solve L x = e_j; then (M^-1)_jj = ||x_j:||^2
        for v in e.iter_mut() {
            *v = 0.0;
        }
        e[j] = 1.0;
        let x = forward_sub(&c.lower, &e);
        diag[j] = x[j..].iter().map(|v| v * v).sum();
    }
    diag
}

/// Sum of selected diagonal entries of (M + jitter*I)^{-1}.
pub fn trace_of_inverse_block(c: &CholeskyFactor, indices: &[usize]) -> Result<f64> {
    let n = c.lower.rows;
    for &i in indices {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, dim: n });
        }
    }
    let diag = inverse_diagonal(c);
    Ok(indices.iter().map(|&i| diag[i]).sum())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
