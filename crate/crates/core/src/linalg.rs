//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Result, SemError};

/// Copies the lower triangle onto the upper one, making `m` bitwise symmetric.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for j in 0..p {
        for i in j + 1..p {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// Pivots below `PIVOT_TOL` times the matching diagonal entry count as zero.
pub const PIVOT_TOL: f64 = 1e-12;

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let fail = || SemError::NotPositiveDefinite(what.to_string());
    let chol = Cholesky::new(m.clone()).ok_or_else(fail)?;
    let l = chol.l_dirty();
    for i in 0..m.nrows() {
        if l[(i, i)] * l[(i, i)] <= PIVOT_TOL * m[(i, i)].abs() {
            return Err(fail());
        }
    }
    Ok(chol)
}

pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Inverse of a symmetric matrix that is expected to be positive definite,
/// failing when its condition number exceeds `1 / rcond_tol`.
pub fn information_inverse(j: &DMatrix<f64>, rcond_tol: f64) -> Result<DMatrix<f64>> {
    let eig = j.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || min <= rcond_tol * max {
        return Err(SemError::SingularInformation);
    }
    spd_inverse(j, "information matrix").map_err(|_| SemError::SingularInformation)
}
