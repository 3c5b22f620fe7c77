//! Monte Carlo comparison of IPC regression with multiple-group models for a
//! between-group difference in a latent correlation.
//!
//! The population is a two-factor model with two indicators per factor and
//! standardized factors. In group 1 every loading is 1 and the correlation is
//! 0.5. Group 2 has `λ11 = 1 + dif_lambda`, `λ32 = 1/2`, `λ21 = λ42 = 1` and correlation
//! `0.5 + true_diff`. Error variances are 0.8 in both groups; intercepts are
//! 1 in group 1 and 2 in group 2.
//!
//! Each replication draws its own ChaCha8 stream keyed by the seed, the
//! condition and the replication index, so results do not depend on how the
//! work is scheduled.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, SemError};
use crate::ipc_core::{compute_ipcs, Centering};
use crate::ipc_regression::{regress, Design};
use crate::linalg;
use crate::mgsem::fit_multigroup_table;
use crate::model_spec::templates::{QUASI_SIMPLEX, TWO_FACTOR_STANDARDIZED, TWO_FACTOR_WITH_GROUP_EFFECTS};
use crate::model_spec::{parse, ConstraintPolicy, ParamTable};
use crate::moments::compute_d;
use crate::sem_engine::{fit_with, FitOptions};

/// Parameter whose between-group difference is studied.
pub const TARGET: &str = "f1~~f2";
pub const ALPHA: f64 = 0.05;
/// Largest tolerated share of failed replications per method.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

const BASE_CORRELATION: f64 = 0.5;
const ERROR_VARIANCE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCondition {
    pub true_diff: f64,
    pub dif_lambda: f64,
    pub n_per_group: usize,
    pub reps: usize,
    pub seed: u64,
}

impl SimCondition {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_group < 25 {
            return Err(SemError::InvalidCondition(format!(
                "n_per_group = {} is below 25",
                self.n_per_group
            )));
        }
        if self.reps == 0 {
            return Err(SemError::InvalidCondition("reps must be at least 1".into()));
        }
        if (BASE_CORRELATION + self.true_diff).abs() >= 1.0 {
            return Err(SemError::InvalidCondition(format!(
                "group 2 correlation {} is outside (-1, 1)",
                BASE_CORRELATION + self.true_diff
            )));
        }
        if !(self.true_diff.is_finite() && self.dif_lambda.is_finite()) {
            return Err(SemError::InvalidCondition("non-finite factor level".into()));
        }
        Ok(())
    }

    /// Stable key for the random streams.
    fn key(&self) -> String {
        format!("{}|{}|{}", self.true_diff, self.dif_lambda, self.n_per_group)
    }
}

/// Exact mean vector and covariance matrix of group 1 or 2.
pub fn population_moments(condition: &SimCondition, group: u8) -> Result<(DVector<f64>, DMatrix<f64>)> {
    condition.validate()?;
    let (rho, l11, l32, intercept) = match group {
        1 => (BASE_CORRELATION, 1.0, 1.0, 1.0),
        2 => (BASE_CORRELATION + condition.true_diff, 1.0 + condition.dif_lambda, 0.5, 2.0),
        g => return Err(SemError::InvalidInput(format!("group must be 1 or 2, got {g}"))),
    };
    let lambda = DMatrix::from_row_slice(4, 2, &[l11, 0.0, 1.0, 0.0, 0.0, l32, 0.0, 1.0]);
    let phi = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
    let sigma = &lambda * phi * lambda.transpose() + DMatrix::identity(4, 4) * ERROR_VARIANCE;
    Ok((DVector::from_element(4, intercept), sigma))
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Random stream for replication `rep` of the unit identified by `key`.
pub fn stream(seed: u64, key: &str, rep: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&fnv1a(key).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(rep);
    rng
}

/// `n` rows from N(μ, LL').
pub fn draw_mvn(mu: &DVector<f64>, chol_l: &DMatrix<f64>, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let p = mu.len();
    let mut out = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(rng);
        }
        let y = mu + chol_l * &z;
        out.row_mut(i).copy_from(&y.transpose());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Single-group model with group effects on the indicators, then IPC regression on the dummy.
    Ipc,
    /// Two-group model with every parameter free.
    MgsemCorrect,
    /// Two-group model with every parameter except the target held equal.
    MgsemMisspecified,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ipc, Method::MgsemCorrect, Method::MgsemMisspecified];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ipc => "ipc",
            Method::MgsemCorrect => "mgsem_correct",
            Method::MgsemMisspecified => "mgsem_misspecified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

impl Estimate {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn rejects(&self) -> bool {
        self.p_value < ALPHA
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: Method,
    /// `None` when the replication failed for this method.
    pub result: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    pub empirical_se: f64,
    pub coverage_95: f64,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: SimCondition,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<RepRecord>,
}

impl ConditionResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

/// Models shared by all replications.
struct Models {
    one_group: ParamTable,
    correct: ParamTable,
    misspecified: ParamTable,
}

impl Models {
    fn new() -> Result<Models> {
        let one_group = parse(TWO_FACTOR_WITH_GROUP_EFFECTS)?;
        let base = parse(TWO_FACTOR_STANDARDIZED)?;
        let correct = base.expand_groups(2, ConstraintPolicy::Free)?;
        let mut misspecified = base.expand_groups(2, ConstraintPolicy::AllEqual)?;
        misspecified.release(&[TARGET])?;
        Ok(Models {
            one_group,
            correct,
            misspecified,
        })
    }
}

/// Population draws for one replication: group 1, group 2.
pub fn draw_replication(condition: &SimCondition, rep: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut rng = stream(condition.seed, &condition.key(), rep as u64);
    let mut out = Vec::with_capacity(2);
    for g in [1, 2] {
        let (mu, sigma) = population_moments(condition, g)?;
        let l = linalg::cholesky(&sigma, "population covariance")?.l();
        out.push(draw_mvn(&mu, &l, condition.n_per_group, &mut rng));
    }
    let g2 = out.pop().expect("two groups");
    let g1 = out.pop().expect("two groups");
    Ok((g1, g2))
}

fn normal_estimate(estimate: f64, se: f64) -> Estimate {
    let normal = Normal::standard();
    let crit = normal.inverse_cdf(1.0 - ALPHA / 2.0);
    Estimate {
        estimate,
        se,
        ci_low: estimate - crit * se,
        ci_high: estimate + crit * se,
        p_value: 2.0 * normal.sf((estimate / se).abs()),
    }
}

fn ipc_arm(models: &Models, g1: &DMatrix<f64>, g2: &DMatrix<f64>) -> Result<Estimate> {
    let n1 = g1.nrows();
    let n = n1 + g2.nrows();
    let table = &models.one_group;
    let mut data = DMatrix::zeros(n, table.observed.len());
    let g_col = table.observed.iter().position(|v| v == "g").expect("group dummy in model");
    let y_cols: Vec<usize> = ["y1", "y2", "y3", "y4"]
        .iter()
        .map(|y| table.observed.iter().position(|v| v == y).expect("indicator in model"))
        .collect();
    for i in 0..n {
        let (src, row, dummy) = if i < n1 { (g1, i, 0.0) } else { (g2, i - n1, 1.0) };
        for (k, &c) in y_cols.iter().enumerate() {
            data[(i, c)] = src[(row, k)];
        }
        data[(i, g_col)] = dummy;
    }
    let options = FitOptions::default();
    let fit = fit_with(table, &data, &options)?;
    let contributions = compute_d(&data, None, options.convention)?;
    let ipcs = compute_ipcs(&fit, &contributions, Centering::Anchored)?;
    let y = ipcs.column_by_name(TARGET).ok_or_else(|| SemError::UnknownParameter(TARGET.into()))?;
    let dummy: Vec<f64> = data.column(g_col).iter().copied().collect();
    let design = Design::with_intercept(&[("g", &dummy)], n)?;
    let reg = regress(&y, &design)?;
    let slope = reg.coefficient("g").expect("dummy coefficient");
    let (ci_low, ci_high) = reg.confidence_interval("g", 1.0 - ALPHA).expect("dummy coefficient");
    Ok(Estimate {
        estimate: slope.gamma_hat,
        se: slope.se_robust,
        ci_low,
        ci_high,
        p_value: slope.p_value.unwrap_or(1.0),
    })
}

fn mgsem_arm(table: &ParamTable, g1: &DMatrix<f64>, g2: &DMatrix<f64>) -> Result<Estimate> {
    let fit = fit_multigroup_table(table, &[g1.clone(), g2.clone()], &FitOptions::default())?;
    let i1 = fit.index_in_group(0, TARGET).expect("target in group 1");
    let i2 = fit.index_in_group(1, TARGET).expect("target in group 2");
    let diff = fit.theta_hat[i2] - fit.theta_hat[i1];
    let v = &fit.vcov_naive;
    let var = v[(i1, i1)] + v[(i2, i2)] - 2.0 * v[(i1, i2)];
    Ok(normal_estimate(diff, var.max(0.0).sqrt()))
}

fn run_method(models: &Models, method: Method, g1: &DMatrix<f64>, g2: &DMatrix<f64>) -> Result<Estimate> {
    match method {
        Method::Ipc => ipc_arm(models, g1, g2),
        Method::MgsemCorrect => mgsem_arm(&models.correct, g1, g2),
        Method::MgsemMisspecified => mgsem_arm(&models.misspecified, g1, g2),
    }
}

fn summarize(method: Method, truth: f64, records: &[RepRecord]) -> MethodSummary {
    let ok: Vec<&Estimate> = records
        .iter()
        .filter(|r| r.method == method)
        .filter_map(|r| r.result.as_ref())
        .collect();
    let total = records.iter().filter(|r| r.method == method).count();
    let k = ok.len() as f64;
    let mean = ok.iter().map(|e| e.estimate).sum::<f64>() / k;
    let var = ok.iter().map(|e| (e.estimate - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    MethodSummary {
        method,
        n_ok: ok.len(),
        n_failed: total - ok.len(),
        mean_estimate: mean,
        bias: mean - truth,
        empirical_se: var.sqrt(),
        coverage_95: ok.iter().filter(|e| e.covers(truth)).count() as f64 / k,
        rejection_rate: ok.iter().filter(|e| e.rejects()).count() as f64 / k,
    }
}

/// Runs `condition` for the given methods in the pool sized by `IPC_SEM_THREADS`.
pub fn run_condition(condition: &SimCondition, methods: &[Method]) -> Result<ConditionResult> {
    condition.validate()?;
    let models = Models::new()?;
    let per_rep: Vec<Vec<RepRecord>> = with_pool(|| {
        (0..condition.reps)
            .into_par_iter()
            .map(|rep| {
                let (g1, g2) = draw_replication(condition, rep)?;
                Ok(methods
                    .iter()
                    .map(|&method| {
                        let result = run_method(&models, method, &g1, &g2);
                        if let Err(e) = &result {
                            log::debug!("rep {rep} {}: {e}", method.name());
                        }
                        RepRecord {
                            rep,
                            method,
                            result: result.ok(),
                        }
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<RepRecord> = per_rep.into_iter().flatten().collect();
    let summaries: Vec<MethodSummary> = methods
        .iter()
        .map(|&m| summarize(m, condition.true_diff, &records))
        .collect();
    for s in &summaries {
        let total = s.n_ok + s.n_failed;
        if s.n_failed as f64 > MAX_FAILURE_SHARE * total as f64 {
            return Err(SemError::TooManyFailures {
                method: s.method.name().to_string(),
                failed: s.n_failed,
                total,
            });
        }
    }
    Ok(ConditionResult {
        condition: *condition,
        summaries,
        records,
    })
}

/// Runs `f` in a rayon pool capped by `IPC_SEM_THREADS` when it is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("IPC_SEM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(k) if k > 0 => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

/// Factor levels of a study; every combination becomes one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub true_diffs: Vec<f64>,
    pub dif_lambdas: Vec<f64>,
    pub n_per_group: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Directory for the CSV reports, relative to the working directory.
    pub output: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            true_diffs: vec![0.0, 0.2, 0.4],
            dif_lambdas: vec![0.0, 0.2],
            n_per_group: vec![125, 1000],
            reps: 500,
            seed: 20_130_501,
            methods: Method::ALL.to_vec(),
            output: None,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<SimConfig> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn conditions(&self) -> Vec<SimCondition> {
        let mut out = Vec::new();
        for &n_per_group in &self.n_per_group {
            for &dif_lambda in &self.dif_lambdas {
                for &true_diff in &self.true_diffs {
                    out.push(SimCondition {
                        true_diff,
                        dif_lambda,
                        n_per_group,
                        reps: self.reps,
                        seed: self.seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: SimConfig,
    pub conditions: Vec<ConditionResult>,
}

impl StudyResult {
    pub fn find(&self, n_per_group: usize, dif_lambda: f64, true_diff: f64) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| {
            c.condition.n_per_group == n_per_group
                && c.condition.dif_lambda == dif_lambda
                && c.condition.true_diff == true_diff
        })
    }

    /// One row per condition and method.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "n_per_group",
            "dif_lambda",
            "true_diff",
            "method",
            "reps",
            "n_ok",
            "n_failed",
            "mean_estimate",
            "bias",
            "empirical_se",
            "coverage_95",
            "rejection_rate",
        ])?;
        for c in &self.conditions {
            for s in &c.summaries {
                wtr.write_record([
                    c.condition.n_per_group.to_string(),
                    c.condition.dif_lambda.to_string(),
                    c.condition.true_diff.to_string(),
                    s.method.name().to_string(),
                    c.condition.reps.to_string(),
                    s.n_ok.to_string(),
                    s.n_failed.to_string(),
                    s.mean_estimate.to_string(),
                    s.bias.to_string(),
                    s.empirical_se.to_string(),
                    s.coverage_95.to_string(),
                    s.rejection_rate.to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Type-I error table: rows are sample size by `dif_lambda`, columns are
    /// methods, cells are rejection rates at `true_diff = 0`.
    pub fn write_type1_table<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["n_per_group".to_string(), "dif_lambda".to_string()];
        header.extend(self.config.methods.iter().map(|m| m.name().to_string()));
        wtr.write_record(&header)?;
        for c in self.conditions.iter().filter(|c| c.condition.true_diff == 0.0) {
            let mut row = vec![c.condition.n_per_group.to_string(), c.condition.dif_lambda.to_string()];
            for m in &self.config.methods {
                row.push(c.summary(*m).map_or(String::new(), |s| s.rejection_rate.to_string()));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes `conditions.csv` and `type1_table.csv` into `dir`.
    pub fn write_reports(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let conditions = dir.join("conditions.csv");
        self.write_csv(std::fs::File::create(&conditions)?)?;
        let table = dir.join("type1_table.csv");
        self.write_type1_table(std::fs::File::create(&table)?)?;
        Ok(vec![conditions, table])
    }
}

/// Runs every condition of `config`.
pub fn full_study(config: &SimConfig) -> Result<StudyResult> {
    if config.methods.is_empty() {
        return Err(SemError::InvalidCondition("no methods selected".into()));
    }
    let conditions = config.conditions();
    for c in &conditions {
        c.validate()?;
    }
    let results = conditions
        .iter()
        .map(|c| {
            log::info!(
                "condition n={} dif_lambda={} true_diff={}",
                c.n_per_group,
                c.dif_lambda,
                c.true_diff
            );
            run_condition(c, &config.methods)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        config: config.clone(),
        conditions: results,
    })
}

/// Four-wave quasi-simplex population whose shared error variance depends on
/// a binary covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiSimplexPopulation {
    /// Autoregression between consecutive true scores.
    pub autoregression: f64,
    /// Error variance when the covariate is 0 and when it is 1.
    pub error_variance: [f64; 2],
    /// Share of observations with the covariate equal to 1.
    pub share: f64,
    pub intercept: f64,
}

impl Default for QuasiSimplexPopulation {
    fn default() -> Self {
        QuasiSimplexPopulation {
            autoregression: 0.8,
            error_variance: [0.28, 0.38],
            share: 0.5,
            intercept: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuasiSimplexSample {
    /// `n × 4` observed scores.
    pub y: DMatrix<f64>,
    /// Covariate that drives the error variance.
    pub dummy: Vec<f64>,
    /// Covariate unrelated to anything.
    pub noise: Vec<f64>,
}

impl QuasiSimplexPopulation {
    /// The model fitted to these data.
    pub fn model() -> Result<ParamTable> {
        parse(QUASI_SIMPLEX)
    }

    /// True scores have variance 1 at every wave.
    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> QuasiSimplexSample {
        use rand::Rng;
        let beta = self.autoregression;
        let innovation = (1.0 - beta * beta).sqrt();
        let n1 = (self.share * n as f64).round() as usize;
        let mut y = DMatrix::zeros(n, 4);
        let mut dummy = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for i in 0..n {
            let d = usize::from(i >= n - n1);
            let sd = self.error_variance[d].sqrt();
            let mut eta: f64 = StandardNormal.sample(rng);
            for t in 0..4 {
                if t > 0 {
                    let z: f64 = StandardNormal.sample(rng);
                    eta = beta * eta + innovation * z;
                }
                let e: f64 = StandardNormal.sample(rng);
                y[(i, t)] = self.intercept + eta + sd * e;
            }
            dummy.push(d as f64);
            noise.push(rng.random_range(-1.0..1.0));
        }
        QuasiSimplexSample { y, dummy, noise }
    }
}
