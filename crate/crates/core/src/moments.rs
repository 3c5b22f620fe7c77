//! Half-vectorization and per-observation moment contributions.
//!
//! Row `i` of a [`MomentContributions`] matrix stacks the raw observation
//! `y_i` and `c · vech[(y_i − center)(y_i − center)']`, where `c` is `n/(n−1)`
//! or `1` depending on the [`MomentConvention`]. With the column means as
//! center, the average of the covariance part is exactly `vech(S)` under the
//! same convention.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentConvention {
    /// Unbiased covariance, divisor n − 1.
    #[default]
    #[serde(rename = "n_minus_1")]
    NMinus1,
    /// Maximum likelihood covariance, divisor n.
    N,
}

impl MomentConvention {
    /// Factor applied to the raw cross products.
    pub fn factor(self, n: usize) -> f64 {
        match self {
            MomentConvention::NMinus1 => n as f64 / (n as f64 - 1.0),
            MomentConvention::N => 1.0,
        }
    }

    pub fn divisor(self, n: usize) -> f64 {
        match self {
            MomentConvention::NMinus1 => n as f64 - 1.0,
            MomentConvention::N => n as f64,
        }
    }
}

/// Number of non-duplicated elements of a symmetric `p × p` matrix.
pub fn vech_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Position of element `(i, j)` (either triangle) in `vech`.
pub fn vech_index(i: usize, j: usize, p: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    c * p - c * (c + 1) / 2 + r
}

/// Column-major stacking of the lower triangle, diagonal included.
pub fn vech(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if !m.is_square() {
        return Err(SemError::DimensionMismatch(format!(
            "vech needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let p = m.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..p {
        for i in j + 1..p {
            let scale = m[(i, j)].abs().max(m[(j, i)].abs()).max(1.0);
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs() / scale);
        }
    }
    if worst > SYMMETRY_TOL {
        return Err(SemError::Asymmetric(worst));
    }
    Ok(vech_unchecked(m))
}

pub(crate) fn vech_unchecked(m: &DMatrix<f64>) -> DVector<f64> {
    let p = m.nrows();
    let mut out = DVector::zeros(vech_len(p));
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

/// Inverse of [`vech`].
pub fn unvech(v: &DVector<f64>, p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

/// Duplication matrix `D` with `D · vech(M) = vec(M)` for symmetric `M`.
pub fn duplication_matrix(p: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(p * p, vech_len(p));
    for j in 0..p {
        for i in 0..p {
            d[(i + j * p, vech_index(i, j, p))] = 1.0;
        }
    }
    d
}

/// Moore-Penrose inverse `(D'D)⁻¹D'`, which maps `vec(M)` back to `vech(M)`.
pub fn duplication_pinv(p: usize) -> DMatrix<f64> {
    let mut dp = DMatrix::zeros(vech_len(p), p * p);
    for j in 0..p {
        for i in 0..p {
            let w = if i == j { 1.0 } else { 0.5 };
            dp[(vech_index(i, j, p), i + j * p)] = w;
        }
    }
    dp
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentContributions {
    /// `n × (p + p(p+1)/2)`: observations, then scaled cross products.
    pub rows: DMatrix<f64>,
    pub center: DVector<f64>,
    pub convention: MomentConvention,
    pub p: usize,
}

impl MomentContributions {
    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn mean_part(&self) -> DMatrix<f64> {
        self.rows.columns(0, self.p).into_owned()
    }

    pub fn d_part(&self) -> DMatrix<f64> {
        self.rows.columns(self.p, vech_len(self.p)).into_owned()
    }

    pub fn column_means(&self) -> DVector<f64> {
        column_means(&self.rows)
    }

    pub fn subset(&self, rows: &[usize]) -> MomentContributions {
        MomentContributions {
            rows: self.rows.select_rows(rows),
            center: self.center.clone(),
            convention: self.convention,
            p: self.p,
        }
    }
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub(crate) fn check_data(data: &DMatrix<f64>) -> Result<()> {
    for j in 0..data.ncols() {
        for i in 0..data.nrows() {
            if !data[(i, j)].is_finite() {
                return Err(SemError::NonFinite { row: i, column: j });
            }
        }
    }
    Ok(())
}

/// Sample mean vector and covariance matrix under `convention`.
pub fn sample_moments(
    data: &DMatrix<f64>,
    convention: MomentConvention,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = data.nrows();
    if n < 2 {
        return Err(SemError::InsufficientData(format!("need at least 2 rows, got {n}")));
    }
    check_data(data)?;
    let mean = column_means(data);
    let p = data.ncols();
    let mut cov = DMatrix::zeros(p, p);
    for row in data.row_iter() {
        for j in 0..p {
            let dj = row[j] - mean[j];
            for i in j..p {
                cov[(i, j)] += (row[i] - mean[i]) * dj;
            }
        }
    }
    let div = convention.divisor(n);
    for j in 0..p {
        for i in j..p {
            let v = cov[(i, j)] / div;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

/// Per-observation moment contributions; `center` defaults to the column means.
pub fn compute_d(
    data: &DMatrix<f64>,
    center: Option<&DVector<f64>>,
    convention: MomentConvention,
) -> Result<MomentContributions> {
    let n = data.nrows();
    let p = data.ncols();
    if n < 2 {
        return Err(SemError::InsufficientData(format!("need at least 2 rows, got {n}")));
    }
    check_data(data)?;
    let center = match center {
        Some(c) if c.len() != p => {
            return Err(SemError::DimensionMismatch(format!(
                "center has length {}, data has {p} columns",
                c.len()
            )))
        }
        Some(c) => c.clone(),
        None => column_means(data),
    };
    let factor = convention.factor(n);
    let width = p + vech_len(p);
    let mut rows = DMatrix::zeros(n, width);
    let mut dev = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            let y = data[(i, j)];
            rows[(i, j)] = y;
            dev[j] = y - center[j];
        }
        let mut k = p;
        for c in 0..p {
            for r in c..p {
                rows[(i, k)] = factor * dev[r] * dev[c];
                k += 1;
            }
        }
    }
    Ok(MomentContributions {
        rows,
        center,
        convention,
        p,
    })
}

/// Empirical covariance (divisor n) of the stacked contribution rows.
pub fn gamma_hat(contrib: &MomentContributions) -> DMatrix<f64> {
    let n = contrib.n();
    if n <= vech_len(contrib.p) {
        log::warn!(
            "gamma_hat: n = {n} does not exceed p(p+1)/2 = {}; the estimate is rank deficient",
            vech_len(contrib.p)
        );
    }
    empirical_covariance(&contrib.rows)
}

/// `n⁻¹ Σ (x_i − x̄)(x_i − x̄)'` over the rows of `m`.
pub fn empirical_covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mean = column_means(m);
    let mut centered = m.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut g = centered.tr_mul(&centered) / n;
    crate::linalg::symmetrize(&mut g);
    g
}
