//! Multiple-group models with cross-group equality constraints, and the
//! generalized expected parameter change / modification index for a shared
//! parameter.
//!
//! The pooled discrepancy is `Σ_g (n_g/n) F_g`. With divisor-n moments and
//! every parameter shared, it differs from the single-group discrepancy of the
//! pooled data by a constant, so the two fits have the same θ̂.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::linalg;
use crate::model_spec::{to_ram_group, ConstraintPolicy, ParamTable, RamModel};
use crate::moments::{compute_d, vech_len, MomentConvention};
use crate::sem_engine::{
    self, chisq_multiplier, implied_moments, negative_variance_warnings, start_values, FitOptions,
    MomentGroup, Problem, DELTA_STEP, SINGULAR_RCOND,
};

#[derive(Debug, Clone)]
pub struct FittedMGModel {
    pub table: ParamTable,
    /// Sorted distinct values of the grouping column.
    pub group_labels: Vec<f64>,
    pub rams: Vec<RamModel>,
    pub param_names: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub group_n: Vec<usize>,
    pub sample_means: Vec<DVector<f64>>,
    pub sample_covs: Vec<DMatrix<f64>>,
    pub mu_hat: Vec<DVector<f64>>,
    pub sigma_hat: Vec<DMatrix<f64>>,
    /// Per group, `(p + p*) × q`; columns of parameters absent from a group are zero.
    pub delta: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    /// `Σ_g (n_g/n) Δ_g'V_gΔ_g`.
    pub j: DMatrix<f64>,
    pub j_inv: DMatrix<f64>,
    pub vcov_naive: DMatrix<f64>,
    pub fmin: f64,
    pub chisq: f64,
    pub df: i64,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
    pub convention: MomentConvention,
    pub warnings: Vec<String>,
    group_data: Vec<DMatrix<f64>>,
}

impl FittedMGModel {
    pub fn n_groups(&self) -> usize {
        self.rams.len()
    }

    /// Free index (0-based) of `name` in group `g` (0-based).
    pub fn index_in_group(&self, g: usize, name: &str) -> Option<usize> {
        self.table.find_free(g + 1, name)
    }

    /// Estimate of `name` in group `g` (0-based): a free estimate or the fixed value.
    pub fn estimate_in_group(&self, g: usize, name: &str) -> Option<f64> {
        self.table
            .group_rows(g + 1)
            .find(|r| r.base_name() == name || r.key() == name)
            .and_then(|r| match (r.free_index, r.fixed_value) {
                (Some(i), _) => Some(self.theta_hat[i - 1]),
                (None, v) => v,
            })
    }

    pub fn se_naive(&self) -> Vec<f64> {
        self.vcov_naive.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn group_data(&self, g: usize) -> &DMatrix<f64> {
        &self.group_data[g]
    }
}

/// Splits `data` rows by the distinct values of `labels`, in ascending order.
pub fn split_groups(data: &DMatrix<f64>, labels: &[f64]) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    if labels.len() != data.nrows() {
        return Err(SemError::DimensionMismatch(format!(
            "{} group labels for {} rows",
            labels.len(),
            data.nrows()
        )));
    }
    if labels.iter().any(|l| !l.is_finite()) {
        return Err(SemError::InvalidInput("group column has missing values".into()));
    }
    let mut values: Vec<f64> = labels.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let parts = values
        .iter()
        .map(|v| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *v).collect();
            data.select_rows(&rows)
        })
        .collect();
    Ok((values, parts))
}

/// Replicates the single-group `table` over the groups found in `labels`.
pub fn fit_multigroup(
    table: &ParamTable,
    data: &DMatrix<f64>,
    labels: &[f64],
    policy: ConstraintPolicy,
    options: &FitOptions,
) -> Result<FittedMGModel> {
    let (values, parts) = split_groups(data, labels)?;
    let expanded = table.expand_groups(values.len(), policy)?;
    let mut fit = fit_multigroup_table(&expanded, &parts, options)?;
    fit.group_labels = values;
    Ok(fit)
}

/// Fits an already expanded multi-group table; `groups[g]` holds group `g + 1`.
pub fn fit_multigroup_table(
    table: &ParamTable,
    groups: &[DMatrix<f64>],
    options: &FitOptions,
) -> Result<FittedMGModel> {
    let n_groups = table.n_groups();
    if groups.len() != n_groups {
        return Err(SemError::DimensionMismatch(format!(
            "table has {n_groups} groups, {} data sets supplied",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().position(|d| d.nrows() == 0) {
        return Err(SemError::EmptyGroup(format!("{}", g + 1)));
    }
    let n: usize = groups.iter().map(|d| d.nrows()).sum();
    let q = table.n_free();
    let moment_groups = groups
        .iter()
        .enumerate()
        .map(|(g, data)| {
            let ram = to_ram_group(table, g + 1, &table.observed)?;
            MomentGroup::new(ram, data, options.convention, data.nrows() as f64 / n as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = Problem {
        groups: moment_groups,
        q,
    };
    let start = match &options.start {
        Some(s) if s.len() != q => {
            return Err(SemError::DimensionMismatch(format!(
                "start has length {}, model has {q} free parameters",
                s.len()
            )))
        }
        Some(s) => s.clone(),
        None => start_values(table, &problem.groups),
    };
    let outcome = problem.solve(&start, options)?;
    let theta_hat: Vec<f64> = outcome.x.iter().copied().collect();

    let mut j = DMatrix::zeros(q, q);
    let (mut mu_hat, mut sigma_hat, mut deltas, mut vs) = (vec![], vec![], vec![], vec![]);
    for g in &problem.groups {
        let (mu, sigma) = implied_moments(&g.ram, &theta_hat)?;
        let d = sem_engine::delta_columns(&g.ram, &theta_hat, DELTA_STEP, &g.used)?;
        let v = sem_engine::weight_matrix_nt(&sigma)?;
        j += g.weight * (d.transpose() * (&v * &d));
        mu_hat.push(mu);
        sigma_hat.push(sigma);
        deltas.push(d);
        vs.push(v);
    }
    linalg::symmetrize(&mut j);
    let j_inv = linalg::information_inverse(&j, SINGULAR_RCOND)?;
    let p = table.observed.len();
    let df = (n_groups * (p + vech_len(p))) as i64 - q as i64;
    let fmin = outcome.f;

    Ok(FittedMGModel {
        table: table.clone(),
        group_labels: (1..=n_groups).map(|g| g as f64).collect(),
        rams: problem.groups.iter().map(|g| g.ram.clone()).collect(),
        param_names: table.param_names(),
        warnings: negative_variance_warnings(table, &theta_hat),
        theta_hat,
        group_n: problem.groups.iter().map(|g| g.n).collect(),
        sample_means: problem.groups.iter().map(|g| g.mean.clone()).collect(),
        sample_covs: problem.groups.iter().map(|g| g.cov.clone()).collect(),
        mu_hat,
        sigma_hat,
        delta: deltas,
        v: vs,
        vcov_naive: &j_inv / n as f64,
        j,
        j_inv,
        fmin,
        chisq: chisq_multiplier(n) * fmin,
        df,
        converged: outcome.converged,
        iterations: outcome.iterations,
        n,
        convention: options.convention,
        group_data: groups.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedEpc {
    pub parameter: String,
    /// Expected change of the shared parameter in each group if it were freed there.
    pub epc: Vec<f64>,
    /// `epc[1] − epc[0]`.
    pub diff: f64,
    /// Sandwich standard error of `diff`.
    pub se: f64,
    /// `diff² / se²`.
    pub mi: f64,
}

/// Generalized EPC and MI for freeing `target` across two groups of an
/// equality-constrained fit.
///
/// `δ_g = J_g⁻¹Δ_g'V_g(m*_g − implied_g)` uses the Hessian of group g with
/// respect to the whole parameter vector. The variance of `δ_2 − δ_1` is the
/// sandwich `Σ_g w_g' Γ̂_g w_g / n_g`, where `w_g` is the target row of
/// `J_g⁻¹Δ_g'V_g` and `Γ̂_g` the covariance of the group's moment
/// contributions centered at the implied mean.
pub fn generalized_epc_mi(fit: &FittedMGModel, target: &str) -> Result<GeneralizedEpc> {
    if fit.n_groups() != 2 {
        return Err(SemError::InvalidInput(format!(
            "generalized EPC needs exactly two groups, fit has {}",
            fit.n_groups()
        )));
    }
    let idx: Vec<usize> = (0..2)
        .map(|g| fit.index_in_group(g, target).ok_or_else(|| SemError::UnknownParameter(target.to_string())))
        .collect::<Result<_>>()?;
    if idx[0] != idx[1] {
        return Err(SemError::NotEqualityConstrained(target.to_string()));
    }
    let k = idx[0];
    let mut epc = Vec::with_capacity(2);
    let mut var = 0.0;
    for g in 0..2 {
        let delta = &fit.delta[g];
        let v = &fit.v[g];
        let mut jg = delta.transpose() * (v * delta);
        linalg::symmetrize(&mut jg);
        let jg_inv = linalg::information_inverse(&jg, SINGULAR_RCOND)?;
        let w = (jg_inv.row(k) * delta.transpose()) * v;

        let data = &fit.group_data[g];
        let (mean, cov) = (&fit.sample_means[g], &fit.sample_covs[g]);
        let b = mean - &fit.mu_hat[g];
        let m_star = sem_engine::stack(mean, &(cov + &b * b.transpose()));
        let resid = m_star - sem_engine::stack(&fit.mu_hat[g], &fit.sigma_hat[g]);
        epc.push((&w * resid)[0]);

        let contrib = compute_d(data, Some(&fit.mu_hat[g]), fit.convention)?;
        let scores = &contrib.rows * w.transpose();
        let ng = data.nrows() as f64;
        let mean_score = scores.sum() / ng;
        let s2 = scores.iter().map(|s| (s - mean_score).powi(2)).sum::<f64>() / ng;
        var += s2 / ng;
    }
    let diff = epc[1] - epc[0];
    Ok(GeneralizedEpc {
        parameter: target.to_string(),
        epc,
        diff,
        se: var.sqrt(),
        mi: diff * diff / var,
    })
}
