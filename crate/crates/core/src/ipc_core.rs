//! Individual parameter contributions.
//!
//! Each observation's stacked moment contribution `c_i` is mapped through
//! `W = J⁻¹Δ'V`, the linearization of the estimator around θ̂. With
//! [`Centering::Anchored`] the rows are `θ̂ + W(c_i − implied)`, so the column
//! means reproduce θ̂ up to the first-order condition; [`Centering::Raw`]
//! gives `W·c_i`. The two differ by a constant per column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SemError};
use crate::moments::{empirical_covariance, MomentContributions};
use crate::sem_engine::FittedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    Raw,
    #[default]
    Anchored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpcMatrix {
    /// `n × q`.
    pub values: DMatrix<f64>,
    pub param_names: Vec<String>,
    pub centering: Centering,
    pub fit_ref: String,
}

impl IpcMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.param_names.iter().position(|n| n == name)?;
        Some(self.values.column(j).iter().copied().collect())
    }

    pub fn column_means(&self) -> DVector<f64> {
        crate::moments::column_means(&self.values)
    }
}

/// `W = J⁻¹Δ'V`, so that `W·Δ = I_q`.
pub fn transformation_matrix(fit: &FittedModel) -> DMatrix<f64> {
    &fit.j_inv * fit.delta.transpose() * &fit.v
}

pub fn compute_ipcs(
    fit: &FittedModel,
    contributions: &MomentContributions,
    centering: Centering,
) -> Result<IpcMatrix> {
    let w = transformation_matrix(fit);
    if contributions.rows.ncols() != w.ncols() {
        return Err(SemError::DimensionMismatch(format!(
            "W has {} columns, contributions have {}",
            w.ncols(),
            contributions.rows.ncols()
        )));
    }
    if contributions.convention != fit.convention {
        log::warn!("contributions and fit use different moment conventions");
    }
    // n × q = C · W'
    let mut values = &contributions.rows * w.transpose();
    if centering == Centering::Anchored {
        let shift = DVector::from_column_slice(&fit.theta_hat) - &w * fit.implied_stack();
        for (j, mut col) in values.column_iter_mut().enumerate() {
            col.add_scalar_mut(shift[j]);
        }
    }
    Ok(IpcMatrix {
        values,
        param_names: fit.param_names.clone(),
        centering,
        fit_ref: fit.fit_id(),
    })
}

/// `n⁻¹ cov(IPC rows)`, the sandwich estimate of var(θ̂).
pub fn ipc_vcov(ipcs: &IpcMatrix) -> DMatrix<f64> {
    empirical_covariance(&ipcs.values) / ipcs.n() as f64
}

/// Appends the IPC columns to `data` as `<prefix><parameter name>`.
pub fn attach_ipcs(data: &Dataset, ipcs: &IpcMatrix, prefix: &str) -> Result<Dataset> {
    if data.n_rows() != ipcs.n() {
        return Err(SemError::DimensionMismatch(format!(
            "data has {} rows, IPC matrix has {}",
            data.n_rows(),
            ipcs.n()
        )));
    }
    let mut out = data.clone();
    for (j, name) in ipcs.param_names.iter().enumerate() {
        let column: Vec<f64> = ipcs.values.column(j).iter().copied().collect();
        out.push_column(format!("{prefix}{name}"), column)?;
    }
    Ok(out)
}
