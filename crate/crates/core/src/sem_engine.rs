//! Normal-theory maximum likelihood for mean and covariance structures.
//!
//! Moments are always stacked as `(μ, vech Σ)`, matching the column layout of
//! [`MomentContributions`]. The discrepancy is
//!
//! ```text
//! F = log|Σ| + tr(SΣ⁻¹) − log|S| − p + (ȳ − μ)'Σ⁻¹(ȳ − μ)
//! ```
//!
//! and its gradient is `−2 Δ'V (m* − implied)`, with `m*` the sample moments
//! whose covariance part is `S + (ȳ − μ)(ȳ − μ)'`. At a solution with a
//! saturated mean structure `m*` coincides with `(ȳ, vech S)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::ipc_core::{self, Centering};
use crate::linalg;
use crate::model_spec::{to_ram, Operator, ParamTable, RamModel, SlotValue};
use crate::moments::{
    compute_d, gamma_hat, sample_moments, vech_index, vech_len,
    vech_unchecked, MomentContributions, MomentConvention,
};
use crate::optim::{self, BfgsOptions, Objective};

/// Chi-square statistics are `(n − CHISQ_N_OFFSET) · F_min`.
pub const CHISQ_N_OFFSET: f64 = 1.0;

/// Relative finite-difference step for Δ: `h = DELTA_STEP · max(1, |θ_j|)`.
pub const DELTA_STEP: f64 = 1e-6;

/// J is declared singular when `λ_min ≤ SINGULAR_RCOND · λ_max`.
pub const SINGULAR_RCOND: f64 = 1e-10;

pub fn chisq_multiplier(n: usize) -> f64 {
    n as f64 - CHISQ_N_OFFSET
}

/// Model-implied mean vector and covariance matrix of the observed variables.
pub fn implied_moments(ram: &RamModel, theta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mats = ram.materialize(theta)?;
    let v = ram.n_vars();
    let p = ram.n_observed();
    let i_minus_a = DMatrix::<f64>::identity(v, v) - &mats.a;
    let b = i_minus_a.try_inverse().ok_or(SemError::SingularPaths)?;
    if b.iter().any(|x| !x.is_finite()) {
        return Err(SemError::SingularPaths);
    }
    let bp = b.rows(0, p).into_owned();
    let mut sigma = &bp * &mats.s * bp.transpose();
    linalg::symmetrize(&mut sigma);
    let mu = &bp * &mats.m;
    Ok((mu, sigma))
}

/// `(μ, vech Σ)` at `theta`.
pub fn implied_stack(ram: &RamModel, theta: &[f64]) -> Result<DVector<f64>> {
    let (mu, sigma) = implied_moments(ram, theta)?;
    Ok(stack(&mu, &sigma))
}

pub(crate) fn stack(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
    let p = mu.len();
    let vs = vech_unchecked(sigma);
    let mut out = DVector::zeros(p + vs.len());
    out.rows_mut(0, p).copy_from(mu);
    out.rows_mut(p, vs.len()).copy_from(&vs);
    out
}

/// Normal-theory ML discrepancy between sample and implied moments.
pub fn fml(
    sample_mu: &DVector<f64>,
    sample_sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let s_chol = linalg::cholesky(sample_sigma, "sample covariance")?;
    discrepancy(linalg::log_det_chol(&s_chol), sample_mu, sample_sigma, mu, sigma)
}

fn discrepancy(
    log_det_s: f64,
    sample_mu: &DVector<f64>,
    sample_sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let p = sigma.nrows();
    if sample_mu.len() != p || mu.len() != p || sample_sigma.nrows() != p {
        return Err(SemError::DimensionMismatch("moment dimensions differ".into()));
    }
    let chol = linalg::cholesky(sigma, "implied covariance")?;
    let log_det = linalg::log_det_chol(&chol);
    let trace = chol.solve(sample_sigma).trace();
    let resid = sample_mu - mu;
    let quad = resid.dot(&chol.solve(&resid));
    Ok(log_det + trace - log_det_s - p as f64 + quad)
}

/// Central finite-difference Jacobian of [`implied_stack`] with the default step.
pub fn delta(ram: &RamModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    delta_with_step(ram, theta, DELTA_STEP)
}

/// As [`delta`] with `h_j = step · max(1, |θ_j|)`.
pub fn delta_with_step(ram: &RamModel, theta: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let cols: Vec<usize> = (0..theta.len()).collect();
    delta_columns(ram, theta, step, &cols)
}

pub(crate) fn delta_columns(ram: &RamModel, theta: &[f64], step: f64, cols: &[usize]) -> Result<DMatrix<f64>> {
    let p = ram.n_observed();
    let mut jac = DMatrix::zeros(p + vech_len(p), theta.len());
    let mut work = theta.to_vec();
    for &j in cols {
        let h = step * theta[j].abs().max(1.0);
        work[j] = theta[j] + h;
        let plus = implied_stack(ram, &work)?;
        work[j] = theta[j] - h;
        let minus = implied_stack(ram, &work)?;
        work[j] = theta[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Normal-theory weight matrix: `Σ⁻¹` for the means and
/// `½ D'(Σ⁻¹ ⊗ Σ⁻¹)D` for the covariances.
pub fn weight_matrix_nt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = linalg::spd_inverse(sigma, "implied covariance")?;
    Ok(weight_from_inverse(&inv))
}

fn weight_from_inverse(inv: &DMatrix<f64>) -> DMatrix<f64> {
    let p = inv.nrows();
    let ps = vech_len(p);
    let mut v = DMatrix::zeros(p + ps, p + ps);
    v.view_mut((0, 0), (p, p)).copy_from(inv);
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j..p).map(move |i| (i, j))).collect();
    for (k, &(i, j)) in pairs.iter().enumerate() {
        for (l, &(r, s)) in pairs.iter().enumerate().skip(k) {
            // sum over the vec positions duplicated by each vech element
            let mut acc = inv[(i, r)] * inv[(j, s)];
            if r != s {
                acc += inv[(i, s)] * inv[(j, r)];
            }
            if i != j {
                acc += inv[(j, r)] * inv[(i, s)];
                if r != s {
                    acc += inv[(j, s)] * inv[(i, r)];
                }
            }
            let val = 0.5 * acc;
            v[(p + k, p + l)] = val;
            v[(p + l, p + k)] = val;
        }
    }
    v
}

/// Normal-theory asymptotic covariance of the stacked sample moments,
/// `blockdiag(Σ, 2 D⁺(Σ ⊗ Σ)D⁺')`; the inverse of [`weight_matrix_nt`].
pub fn gamma_nt(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let p = sigma.nrows();
    let ps = vech_len(p);
    let mut g = DMatrix::zeros(p + ps, p + ps);
    g.view_mut((0, 0), (p, p)).copy_from(sigma);
    for j in 0..p {
        for i in j..p {
            for s in 0..p {
                for r in s..p {
                    let k = vech_index(i, j, p);
                    let l = vech_index(r, s, p);
                    g[(p + k, p + l)] = sigma[(i, r)] * sigma[(j, s)] + sigma[(i, s)] * sigma[(j, r)];
                }
            }
        }
    }
    g
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub convention: MomentConvention,
    pub max_iter: usize,
    /// Bound on `‖Δ'V(m − implied)‖∞` at convergence.
    pub grad_tol: f64,
    pub f_rel_tol: f64,
    /// Overrides the default starting values.
    pub start: Option<Vec<f64>>,
    /// Return a non-converged solution instead of an error.
    pub allow_nonconverged: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            convention: MomentConvention::NMinus1,
            max_iter: 500,
            grad_tol: 1e-6,
            f_rel_tol: 1e-10,
            start: None,
            allow_nonconverged: false,
        }
    }
}

impl FitOptions {
    pub fn with_convention(convention: MomentConvention) -> Self {
        FitOptions {
            convention,
            ..FitOptions::default()
        }
    }
}

/// One group's moment structure inside an estimation problem.
#[derive(Debug, Clone)]
pub(crate) struct MomentGroup {
    pub ram: RamModel,
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_det_cov: f64,
    /// n_g / n.
    pub weight: f64,
    /// Free parameters that appear in this group (0-based).
    pub used: Vec<usize>,
}

impl MomentGroup {
    pub fn new(ram: RamModel, data: &DMatrix<f64>, convention: MomentConvention, weight: f64) -> Result<Self> {
        let n = data.nrows();
        let p = data.ncols();
        if p != ram.n_observed() {
            return Err(SemError::DimensionMismatch(format!(
                "data has {p} columns, model has {} observed variables",
                ram.n_observed()
            )));
        }
        if n <= p {
            return Err(SemError::InsufficientData(format!(
                "n = {n} must exceed the number of observed variables p = {p}"
            )));
        }
        let (mean, cov) = sample_moments(data, convention)?;
        let chol = linalg::cholesky(&cov, "sample covariance")?;
        let mut used: Vec<usize> = ram
            .slots
            .iter()
            .filter_map(|s| match s.value {
                SlotValue::Free(i) => Some(i),
                SlotValue::Fixed(_) => None,
            })
            .collect();
        used.sort_unstable();
        used.dedup();
        Ok(MomentGroup {
            log_det_cov: linalg::log_det_chol(&chol),
            ram,
            n,
            mean,
            cov,
            weight,
            used,
        })
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }

    /// `(ȳ, vech[S + (ȳ − μ)(ȳ − μ)'])`, the moments whose distance from the
    /// implied stack gives the exact gradient.
    pub fn sample_stack_at(&self, mu: &DVector<f64>) -> DVector<f64> {
        let b = &self.mean - mu;
        let cov = &self.cov + &b * b.transpose();
        stack(&self.mean, &cov)
    }

    pub fn value(&self, theta: &[f64]) -> Option<f64> {
        let (mu, sigma) = implied_moments(&self.ram, theta).ok()?;
        discrepancy(self.log_det_cov, &self.mean, &self.cov, &mu, &sigma)
            .ok()
            .filter(|f| f.is_finite())
    }

    /// Δ, V and the residual `m* − implied` at `theta`.
    pub fn derivatives(&self, theta: &[f64]) -> Result<GroupDerivatives> {
        let (mu, sigma) = implied_moments(&self.ram, theta)?;
        let delta = delta_columns(&self.ram, theta, DELTA_STEP, &self.used)?;
        let v = weight_matrix_nt(&sigma)?;
        let resid = self.sample_stack_at(&mu) - stack(&mu, &sigma);
        Ok(GroupDerivatives {
            delta,
            v,
            resid,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupDerivatives {
    pub delta: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub resid: DVector<f64>,
}

impl GroupDerivatives {
    pub fn score(&self) -> DVector<f64> {
        self.delta.transpose() * (&self.v * &self.resid)
    }

    pub fn information(&self) -> DMatrix<f64> {
        let vd = &self.v * &self.delta;
        let mut j = self.delta.transpose() * vd;
        linalg::symmetrize(&mut j);
        j
    }
}

/// Weighted sum of group discrepancies.
pub(crate) struct Problem {
    pub groups: Vec<MomentGroup>,
    pub q: usize,
}

impl Problem {
    /// `Σ_g w_g Δ_g'V_gΔ_g`.
    pub fn pooled_information(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.q, self.q);
        for g in &self.groups {
            let d = g.derivatives(theta).ok()?;
            j += g.weight * d.information();
        }
        Some(j)
    }

    /// Solves the problem from `start`.
    pub fn solve(&self, start: &[f64], options: &FitOptions) -> Result<optim::BfgsOutcome> {
        let opts = BfgsOptions {
            max_iter: options.max_iter,
            // the objective's gradient is −2·Δ'V(m* − implied)
            grad_tol: 2.0 * options.grad_tol,
            f_rel_tol: options.f_rel_tol,
        };
        let x0 = DVector::from_column_slice(start);
        let mut out = optim::minimize(self, x0, opts).ok_or_else(|| {
            SemError::InvalidInput("starting values give a non-positive-definite implied covariance".into())
        })?;
        if out.converged {
            self.polish(&mut out);
        }
        if !out.converged && !options.allow_nonconverged {
            return Err(SemError::NotConverged {
                iterations: out.iterations,
                gradient_norm: out.gradient.amax() / 2.0,
            });
        }
        Ok(out)
    }

    /// Fisher-scoring steps `θ ← θ + J⁻¹ Σ_g w_g Δ_g'V_g(m*_g − implied_g)`
    /// from a converged point, kept while the discrepancy does not increase.
    fn polish(&self, out: &mut optim::BfgsOutcome) {
        for _ in 0..POLISH_STEPS {
            let theta = out.x.as_slice();
            let mut j = DMatrix::zeros(self.q, self.q);
            let mut score = DVector::zeros(self.q);
            for g in &self.groups {
                let Ok(d) = g.derivatives(theta) else { return };
                j += g.weight * d.information();
                score += g.weight * d.score();
            }
            let Ok(j_inv) = linalg::spd_inverse(&j, "information") else { return };
            let step = j_inv * score;
            if step.amax() < 1e-13 {
                return;
            }
            let trial = &out.x + &step;
            let (Some(f), Some(grad)) = (self.value(&trial), self.gradient(&trial)) else { return };
            if f > out.f + 1e-14 * (1.0 + out.f.abs()) || grad.amax() > out.gradient.amax() {
                return;
            }
            out.x = trial;
            out.f = f;
            out.gradient = grad;
        }
    }
}

const POLISH_STEPS: usize = 4;

impl Objective for Problem {
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        let theta = x.as_slice();
        let mut total = 0.0;
        for g in &self.groups {
            total += g.weight * g.value(theta)?;
        }
        Some(total)
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let theta = x.as_slice();
        let mut grad = DVector::zeros(self.q);
        for g in &self.groups {
            let d = g.derivatives(theta).ok()?;
            grad -= 2.0 * g.weight * d.score();
        }
        grad.iter().all(|v| v.is_finite()).then_some(grad)
    }

    fn inverse_hessian_guess(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        // the expected Hessian of F is 2J
        let j = self.pooled_information(x.as_slice())? * 2.0;
        linalg::spd_inverse(&j, "information").ok()
    }
}

/// Default starting values: loadings 1, regressions 0, variances half the
/// sample variance (1 for latents), covariances 0, intercepts at the sample means.
pub(crate) fn start_values(table: &ParamTable, groups: &[MomentGroup]) -> Vec<f64> {
    table
        .free_rows()
        .into_iter()
        .map(|row| {
            if let Some(s) = row.start {
                return s;
            }
            let group = &groups[(row.group - 1).min(groups.len() - 1)];
            let obs = group.ram.observed.iter().position(|n| *n == row.lhs);
            match row.op {
                Operator::Loading => 1.0,
                Operator::Regression => 0.0,
                Operator::Covariance if row.lhs == row.rhs => match obs {
                    Some(i) => 0.5 * group.cov[(i, i)],
                    None => 1.0,
                },
                Operator::Covariance => 0.0,
                Operator::Intercept => obs.map(|i| group.mean[i]).unwrap_or(0.0),
            }
        })
        .collect()
}

/// Flags variance parameters estimated below zero.
pub(crate) fn negative_variance_warnings(table: &ParamTable, theta: &[f64]) -> Vec<String> {
    let names = table.param_names();
    table
        .free_rows()
        .iter()
        .enumerate()
        .filter(|(i, r)| r.op == Operator::Covariance && r.lhs == r.rhs && theta[*i] < 0.0)
        .map(|(i, _)| format!("negative variance estimate for {} ({:.4})", names[i], theta[i]))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub table: ParamTable,
    pub ram: RamModel,
    pub param_names: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub sample_mean: DVector<f64>,
    pub sample_cov: DMatrix<f64>,
    pub convention: MomentConvention,
    pub sigma_hat: DMatrix<f64>,
    pub mu_hat: DVector<f64>,
    /// `(p + p*) × q` Jacobian of the stacked implied moments.
    pub delta: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub j_inv: DMatrix<f64>,
    pub vcov_naive: DMatrix<f64>,
    pub vcov_sandwich: DMatrix<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub fmin: f64,
    pub chisq: f64,
    pub chisq_scaled: Option<f64>,
    pub scaling_factor: Option<f64>,
    pub df: i64,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
    pub warnings: Vec<String>,
}

impl FittedModel {
    pub fn q(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn p(&self) -> usize {
        self.sample_mean.len()
    }

    /// `(ȳ, vech S)`.
    pub fn sample_stack(&self) -> DVector<f64> {
        stack(&self.sample_mean, &self.sample_cov)
    }

    pub fn implied_stack(&self) -> DVector<f64> {
        stack(&self.mu_hat, &self.sigma_hat)
    }

    /// First-order condition vector `Δ'V(m − implied)`.
    pub fn score(&self) -> DVector<f64> {
        self.delta.transpose() * (&self.v * (self.sample_stack() - self.implied_stack()))
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name).or_else(|| {
            self.table.find_free(1, name)
        })
    }

    pub fn se_naive(&self) -> Vec<f64> {
        self.vcov_naive.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn se_sandwich(&self) -> Vec<f64> {
        self.vcov_sandwich.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Identifier tied to the estimates, carried by IPC matrices.
    pub fn fit_id(&self) -> String {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.n.hash(&mut h);
        for t in &self.theta_hat {
            t.to_bits().hash(&mut h);
        }
        self.param_names.hash(&mut h);
        format!("fit-{:016x}", h.finish())
    }
}

/// Fits `table` to `data` (columns in `table.observed` order) with default options.
pub fn fit(table: &ParamTable, data: &DMatrix<f64>) -> Result<FittedModel> {
    fit_with(table, data, &FitOptions::default())
}

pub fn fit_with(table: &ParamTable, data: &DMatrix<f64>, options: &FitOptions) -> Result<FittedModel> {
    if table.n_groups() != 1 {
        return Err(SemError::InvalidInput(
            "single-group fit received a multi-group table; use mgsem".into(),
        ));
    }
    let ram = to_ram(table, &table.observed)?;
    let group = MomentGroup::new(ram.clone(), data, options.convention, 1.0)?;
    let q = table.n_free();
    let p = group.p();
    let problem = Problem {
        groups: vec![group],
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
    let group = &problem.groups[0];

    let (mu_hat, sigma_hat) = implied_moments(&ram, &theta_hat)?;
    let delta_hat = delta(&ram, &theta_hat)?;
    let v = weight_matrix_nt(&sigma_hat)?;
    let mut j = delta_hat.transpose() * (&v * &delta_hat);
    linalg::symmetrize(&mut j);
    let j_inv = linalg::information_inverse(&j, SINGULAR_RCOND)?;
    let n = group.n;
    let fmin = outcome.f;
    let df = (p * (p + 3) / 2) as i64 - q as i64;

    let mut warnings = negative_variance_warnings(table, &theta_hat);
    if n <= vech_len(p) {
        warnings.push(format!(
            "n = {n} does not exceed p(p+1)/2 = {}; robust statistics are unstable",
            vech_len(p)
        ));
    }

    let mut fitted = FittedModel {
        table: table.clone(),
        ram,
        param_names: table.param_names(),
        theta_hat,
        sample_mean: group.mean.clone(),
        sample_cov: group.cov.clone(),
        convention: options.convention,
        sigma_hat,
        mu_hat,
        delta: delta_hat,
        v,
        vcov_naive: &j_inv / n as f64,
        j,
        j_inv,
        vcov_sandwich: DMatrix::zeros(q, q),
        gamma_hat: DMatrix::zeros(0, 0),
        fmin,
        chisq: chisq_multiplier(n) * fmin,
        chisq_scaled: None,
        scaling_factor: None,
        df,
        converged: outcome.converged,
        iterations: outcome.iterations,
        n,
        warnings,
    };

    let contributions = compute_d(data, None, options.convention)?;
    fitted.vcov_sandwich = vcov_sandwich(&fitted, &contributions)?;
    fitted.gamma_hat = gamma_hat(&contributions);
    if let Some((scaled, c)) = sb_scaled_chisq(&fitted, &fitted.gamma_hat) {
        fitted.chisq_scaled = Some(scaled);
        fitted.scaling_factor = Some(c);
    }
    Ok(fitted)
}

/// Robust covariance of θ̂: the empirical covariance of the anchored IPC rows, divided by n.
pub fn vcov_sandwich(fit: &FittedModel, contributions: &MomentContributions) -> Result<DMatrix<f64>> {
    let ipcs = ipc_core::compute_ipcs(fit, contributions, Centering::Anchored)?;
    Ok(ipc_core::ipc_vcov(&ipcs))
}

/// Satorra-Bentler scaling `c = tr(UΓ̂)/df` with `U = V − VΔJ⁻¹Δ'V`; `None` when df = 0.
pub fn sb_scaled_chisq(fit: &FittedModel, gamma: &DMatrix<f64>) -> Option<(f64, f64)> {
    if fit.df <= 0 {
        return None;
    }
    let vd = &fit.v * &fit.delta;
    let u = &fit.v - &vd * &fit.j_inv * vd.transpose();
    let c = (u * gamma).trace() / fit.df as f64;
    Some((fit.chisq / c, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::parse;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn fml_scalar_case() {
        let m = DVector::from_element(1, 0.0);
        let f = fml(&m, &scalar(2.0), &m, &scalar(1.0)).unwrap();
        assert_relative_eq!(f, 1.0 - 2f64.ln(), epsilon = 1e-15);
        assert_eq!(fml(&m, &scalar(2.0), &m, &scalar(2.0)).unwrap(), 0.0);
        assert!(fml(&m, &scalar(2.0), &m, &scalar(-1.0)).is_err());
    }

    #[test]
    fn fml_positive_off_the_diagonal() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
            let sig = &b * b.transpose() + DMatrix::identity(3, 3) * 0.1;
            let m1 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let m2 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            assert!(fml(&m1, &s, &m2, &sig).unwrap() > 0.0);
            assert!(fml(&m1, &s, &m1, &s).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn weight_matrix_small_cases() {
        let v = weight_matrix_nt(&scalar(2.0)).unwrap();
        assert_relative_eq!(v[(0, 0)], 0.5);
        assert_relative_eq!(v[(1, 1)], 0.125);
        let v3 = weight_matrix_nt(&DMatrix::identity(3, 3)).unwrap();
        let diag: Vec<f64> = (3..9).map(|k| v3[(k, k)]).collect();
        assert_eq!(diag, vec![0.5, 1.0, 1.0, 0.5, 1.0, 0.5]);
        assert_eq!(v3.sum() - 3.0 - diag.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn weight_matrix_matches_kronecker_construction() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in 1..5 {
            let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
            let sigma = &a * a.transpose() + DMatrix::identity(p, p);
            let inv = sigma.clone().try_inverse().unwrap();
            let d = crate::moments::duplication_matrix(p);
            let kron = inv.kronecker(&inv);
            let expected = d.transpose() * kron * &d * 0.5;
            let v = weight_matrix_nt(&sigma).unwrap();
            let block = v.view((p, p), (vech_len(p), vech_len(p)));
            assert!((block - &expected).amax() < 1e-12);
            // V is the inverse of the normal-theory moment covariance
            let prod = &v * gamma_nt(&sigma);
            assert!((prod - DMatrix::identity(v.nrows(), v.nrows())).amax() < 1e-10);
            assert!(v.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn implied_for_standardized_two_factor_population() {
        let t = parse("f1 =~ NA*y1 + y2\nf2 =~ NA*y3 + y4\nf1 ~~ 1*f1\nf2 ~~ 1*f2\nf1 ~~ f2").unwrap();
        let ram = to_ram(&t, &t.observed).unwrap();
        let names = t.param_names();
        let mut theta = vec![0.0; t.n_free()];
        for (i, n) in names.iter().enumerate() {
            theta[i] = match n.as_str() {
                "f1=~y1" | "f1=~y2" | "f2=~y4" => 1.0,
                "f2=~y3" => 0.5,
                "f1~~f2" => 0.5,
                n if n.ends_with("~1") => 1.0,
                _ => 0.8,
            };
        }
        let (mu, sigma) = implied_moments(&ram, &theta).unwrap();
        assert_relative_eq!(sigma[(0, 0)], 1.8, epsilon = 1e-15);
        assert_relative_eq!(sigma[(0, 1)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(sigma[(0, 2)], 0.25, epsilon = 1e-15);
        assert_eq!(mu.as_slice(), &[1.0; 4]);
        assert_eq!(sigma, sigma.transpose());
    }

    #[test]
    fn quasi_simplex_without_regressions_has_no_cross_wave_covariance() {
        let t = parse(crate::model_spec::templates::QUASI_SIMPLEX).unwrap();
        let ram = to_ram(&t, &t.observed).unwrap();
        let theta: Vec<f64> = t
            .free_rows()
            .iter()
            .map(|r| if r.op == Operator::Regression { 0.0 } else { 0.5 })
            .collect();
        let (_, sigma) = implied_moments(&ram, &theta).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(sigma[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn saturated_model_is_identity_map() {
        let t = parse("y1 ~~ y2").unwrap();
        assert_eq!(t.n_free(), 5);
        let ram = to_ram(&t, &t.observed).unwrap();
        let theta = [0.3, 2.0, 1.5, -1.0, 4.0];
        let stack = implied_stack(&ram, &theta).unwrap();
        let mut got: Vec<f64> = stack.iter().copied().collect();
        let mut want = theta.to_vec();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
        let d = delta(&ram, &theta).unwrap();
        for col in d.column_iter() {
            let ones = col.iter().filter(|x| (**x - 1.0).abs() < 1e-9).count();
            let zeros = col.iter().filter(|x| x.abs() < 1e-9).count();
            assert_eq!((ones, zeros), (1, col.len() - 1));
        }
    }

    #[test]
    fn singular_paths_detected() {
        let t = parse("a ~ b\nb ~ a").unwrap();
        let ram = to_ram(&t, &t.observed).unwrap();
        let theta: Vec<f64> = t
            .free_rows()
            .iter()
            .map(|r| if r.op == Operator::Regression { 1.0 } else { 1.0 })
            .collect();
        assert!(matches!(implied_moments(&ram, &theta), Err(SemError::SingularPaths)));
    }
}
