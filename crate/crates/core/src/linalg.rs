//! Small dense helpers on top of nalgebra for the matrix sizes used here
//! (state dimension and agent counts in the single digits).

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Builds a matrix from row-major nested rows. Ragged rows are rejected.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Positive definiteness via Cholesky of the symmetric part.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.nrows() == 0 {
        return false;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().is_some()
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Numerical rank by singular values relative to the largest one.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// `[B, AB, ..., A^{n-1}B]`
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    out
}

/// Solves `Mᵀ P + P M = -C` for `P` by vectorising into an `n² × n²` system.
pub fn solve_lyapunov(m: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mt = m.transpose();
    // vec(Mᵀ P) = (I ⊗ Mᵀ) vec P, vec(P M) = (Mᵀ ⊗ I) vec P  (column-major vec)
    let op = id.kronecker(&mt) + mt.kronecker(&id);
    let rhs = DVector::from_column_slice(c.as_slice()) * -1.0;
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Model("Lyapunov operator is singular".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Stacks per-agent vectors into one column.
pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

/// Inverse of [`stack`] for equal block sizes.
pub fn unstack(v: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
    v.as_slice()
        .chunks(block)
        .map(DVector::from_column_slice)
        .collect()
}
