//! The `ipcsem` command line: `fit`, `ipc`, `regress`, `mgsem` and `simulate`.
//!
//! Every command writes its artifact to the path given by `--out` (or the
//! directory given by `--out-dir`) and prints a JSON [`RunReport`] to stdout.
//! Exit codes: 0 success, 2 input or parse error, 3 data error, 4 convergence
//! failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SemError};
use crate::ipc_core::{attach_ipcs, compute_ipcs, Centering};
use crate::ipc_regression::{regress, Design, IpcRegressionResult, ParameterRegression};
use crate::mgsem::{fit_multigroup, generalized_epc_mi, FittedMGModel, GeneralizedEpc};
use crate::model_spec::{parse, ConstraintPolicy, ParamTable};
use crate::moments::{compute_d, MomentConvention};
use crate::sem_engine::{fit_with, FitOptions, FittedModel};
use crate::sim_harness::{full_study, SimConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const IPC_PREFIX: &str = "ipc.";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ipcsem", version, about = "SEM fitting, individual parameter contributions and IPC regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a single-group model.
    Fit(FitArgs),
    /// Write the data with individual parameter contributions appended.
    Ipc(IpcArgs),
    /// Regress IPC columns on covariates.
    Regress(RegressArgs),
    /// Fit a multiple-group model.
    Mgsem(MgsemArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    /// Divisor n − 1.
    #[value(name = "n-minus-1")]
    NMinus1,
    /// Divisor n.
    N,
}

impl From<ConventionArg> for MomentConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::NMinus1 => MomentConvention::NMinus1,
            ConventionArg::N => MomentConvention::N,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CenteringArg {
    Raw,
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConstraintArg {
    #[value(name = "all_equal")]
    AllEqual,
    Free,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model text file.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV data file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "n-minus-1")]
    pub convention: ConventionArg,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IpcArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "anchored")]
    pub centering: CenteringArg,
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    /// CSV written by `ipcsem ipc`.
    #[arg(long)]
    pub data: PathBuf,
    /// Parameters to regress, without the `ipc.` prefix; all IPC columns if omitted.
    #[arg(long, value_delimiter = ',')]
    pub params: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MgsemArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Column holding the group labels.
    #[arg(long)]
    pub group: String,
    #[arg(long, value_enum, default_value = "all_equal")]
    pub constraints: ConstraintArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON file with the factor levels, replications and seed.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub elapsed_seconds: f64,
    pub warnings: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub lhs: String,
    pub op: String,
    pub rhs: String,
    pub est: f64,
    pub se_naive: f64,
    pub se_robust: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub n: usize,
    pub convention: MomentConvention,
    pub converged: bool,
    pub iterations: usize,
    pub fmin: f64,
    pub chisq: f64,
    pub chisq_scaled: Option<f64>,
    pub scaling_factor: Option<f64>,
    pub df: i64,
    pub parameters: Vec<ParameterEstimate>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn from_fit(fit: &FittedModel) -> FitReport {
        let se_n = fit.se_naive();
        let se_r = fit.se_sandwich();
        let parameters = fit
            .table
            .free_rows()
            .iter()
            .enumerate()
            .map(|(i, row)| ParameterEstimate {
                name: fit.param_names[i].clone(),
                lhs: row.lhs.clone(),
                op: row.op.symbol().to_string(),
                rhs: row.rhs.clone(),
                est: fit.theta_hat[i],
                se_naive: se_n[i],
                se_robust: se_r[i],
            })
            .collect();
        FitReport {
            schema_version: SCHEMA_VERSION,
            n: fit.n,
            convention: fit.convention,
            converged: fit.converged,
            iterations: fit.iterations,
            fmin: fit.fmin,
            chisq: fit.chisq,
            chisq_scaled: fit.chisq_scaled,
            scaling_factor: fit.scaling_factor,
            df: fit.df,
            parameters,
            warnings: fit.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressReport {
    pub schema_version: u32,
    #[serde(flatten)]
    pub result: IpcRegressionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub name: String,
    pub group: f64,
    pub est: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgsemReport {
    pub schema_version: u32,
    pub constraints: ConstraintPolicy,
    pub groups: Vec<f64>,
    pub group_n: Vec<usize>,
    pub converged: bool,
    pub fmin: f64,
    pub chisq: f64,
    pub df: i64,
    pub parameters: Vec<GroupEstimate>,
    /// Present for two-group fits with every parameter shared.
    pub epc: Option<Vec<GeneralizedEpc>>,
    pub warnings: Vec<String>,
}

impl MgsemReport {
    pub fn from_fit(fit: &FittedMGModel, constraints: ConstraintPolicy) -> Result<MgsemReport> {
        let se = fit.se_naive();
        let mut parameters = Vec::new();
        for g in 0..fit.n_groups() {
            for row in fit.table.group_rows(g + 1).filter(|r| r.is_free()) {
                let i = row.free_index.expect("free row") - 1;
                parameters.push(GroupEstimate {
                    name: row.base_name(),
                    group: fit.group_labels[g],
                    est: fit.theta_hat[i],
                    se: se[i],
                });
            }
        }
        let epc = if constraints == ConstraintPolicy::AllEqual && fit.n_groups() == 2 {
            let names: Vec<String> = fit.table.group_rows(1).filter(|r| r.is_free()).map(|r| r.base_name()).collect();
            let mut seen = std::collections::HashSet::new();
            Some(
                names
                    .into_iter()
                    .filter(|n| seen.insert(n.clone()))
                    .map(|n| generalized_epc_mi(fit, &n))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(MgsemReport {
            schema_version: SCHEMA_VERSION,
            constraints,
            groups: fit.group_labels.clone(),
            group_n: fit.group_n.clone(),
            converged: fit.converged,
            fmin: fit.fmin,
            chisq: fit.chisq,
            df: fit.df,
            parameters,
            epc,
            warnings: fit.warnings.clone(),
        })
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &SemError) -> i32 {
    use SemError::*;
    match err {
        InsufficientData(_) | NonFinite { .. } | DimensionMismatch(_) | NotPositiveDefinite(_) | Asymmetric(_)
        | EmptyGroup(_) | RankDeficient | MalformedData(_) | Csv(_) => EXIT_DATA,
        NotConverged { .. } | SingularInformation | SingularPaths | TooManyFailures { .. } => EXIT_CONVERGENCE,
        _ => EXIT_INPUT,
    }
}

fn read_model(path: &Path) -> Result<ParamTable> {
    parse(&std::fs::read_to_string(path)?)
}

fn model_data(table: &ParamTable, data: &Dataset) -> Result<nalgebra::DMatrix<f64>> {
    data.select(&table.observed)
}

fn fit_options(args: &ModelArgs) -> FitOptions {
    FitOptions {
        max_iter: args.max_iter,
        ..FitOptions::with_convention(args.convention.into())
    }
}

/// Serializes `value` as pretty JSON followed by a newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

fn fit_single(args: &ModelArgs) -> Result<(ParamTable, Dataset, FittedModel)> {
    let table = read_model(&args.model)?;
    let data = Dataset::read_csv_path(&args.data)?;
    let y = model_data(&table, &data)?;
    let fit = fit_with(&table, &y, &fit_options(args))?;
    Ok((table, data, fit))
}

pub fn cmd_fit(args: &FitArgs) -> Result<RunReport> {
    let start = Instant::now();
    let (_, _, fit) = fit_single(&args.model)?;
    write_json(&args.out, &FitReport::from_fit(&fit))?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: "fit".into(),
        config: serde_json::json!({
            "model": args.model.model,
            "data": args.model.data,
            "convention": MomentConvention::from(args.model.convention),
        }),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        warnings: fit.warnings.clone(),
        outputs: vec![args.out.clone()],
    })
}

pub fn cmd_ipc(args: &IpcArgs) -> Result<RunReport> {
    let start = Instant::now();
    let (table, data, fit) = fit_single(&args.model)?;
    let y = model_data(&table, &data)?;
    let contributions = compute_d(&y, None, fit.convention)?;
    let centering = match args.centering {
        CenteringArg::Raw => Centering::Raw,
        CenteringArg::Anchored => Centering::Anchored,
    };
    let ipcs = compute_ipcs(&fit, &contributions, centering)?;
    let out = attach_ipcs(&data, &ipcs, IPC_PREFIX)?;
    out.write_csv(std::fs::File::create(&args.out)?)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: "ipc".into(),
        config: serde_json::json!({
            "model": args.model.model,
            "data": args.model.data,
            "convention": MomentConvention::from(args.model.convention),
            "centering": centering,
        }),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        warnings: fit.warnings.clone(),
        outputs: vec![args.out.clone()],
    })
}

pub fn cmd_regress(args: &RegressArgs) -> Result<RunReport> {
    let start = Instant::now();
    let data = Dataset::read_csv_path(&args.data)?;
    let params: Vec<String> = if args.params.is_empty() {
        data.names
            .iter()
            .filter_map(|n| n.strip_prefix(IPC_PREFIX).map(str::to_string))
            .collect()
    } else {
        args.params.clone()
    };
    if params.is_empty() {
        return Err(SemError::InvalidInput(format!("no `{IPC_PREFIX}` columns found")));
    }
    let design = Design::from_dataset(&data, &args.covariates)?;
    let parameters = params
        .iter()
        .map(|p| {
            let column = data.column(&format!("{IPC_PREFIX}{p}"))?;
            Ok(ParameterRegression {
                parameter: p.clone(),
                fit: regress(column, &design)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = RegressReport {
        schema_version: SCHEMA_VERSION,
        result: IpcRegressionResult {
            covariates: design.names.clone(),
            parameters,
        },
    };
    write_json(&args.out, &report)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: "regress".into(),
        config: serde_json::json!({
            "data": args.data,
            "params": params,
            "covariates": args.covariates,
        }),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        warnings: vec![],
        outputs: vec![args.out.clone()],
    })
}

pub fn cmd_mgsem(args: &MgsemArgs) -> Result<RunReport> {
    let start = Instant::now();
    let table = read_model(&args.model.model)?;
    let data = Dataset::read_csv_path(&args.model.data)?;
    let y = model_data(&table, &data)?;
    let labels = data.column(&args.group)?.to_vec();
    let policy = match args.constraints {
        ConstraintArg::AllEqual => ConstraintPolicy::AllEqual,
        ConstraintArg::Free => ConstraintPolicy::Free,
    };
    let fit = fit_multigroup(&table, &y, &labels, policy, &fit_options(&args.model))?;
    let report = MgsemReport::from_fit(&fit, policy)?;
    write_json(&args.out, &report)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: "mgsem".into(),
        config: serde_json::json!({
            "model": args.model.model,
            "data": args.model.data,
            "group": args.group,
            "constraints": policy,
            "convention": MomentConvention::from(args.model.convention),
        }),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        warnings: fit.warnings.clone(),
        outputs: vec![args.out.clone()],
    })
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<RunReport> {
    let start = Instant::now();
    let config = SimConfig::from_json(&std::fs::read_to_string(&args.config)?)?;
    let study = full_study(&config)?;
    let dir = match &config.output {
        Some(sub) => args.out_dir.join(sub),
        None => args.out_dir.clone(),
    };
    let outputs = study.write_reports(&dir)?;
    let warnings = study
        .conditions
        .iter()
        .flat_map(|c| {
            c.summaries.iter().filter(|s| s.n_failed > 0).map(move |s| {
                format!(
                    "n={} dif_lambda={} true_diff={}: {} of {} {} replications excluded",
                    c.condition.n_per_group,
                    c.condition.dif_lambda,
                    c.condition.true_diff,
                    s.n_failed,
                    s.n_failed + s.n_ok,
                    s.method.name()
                )
            })
        })
        .collect();
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: "simulate".into(),
        config: serde_json::to_value(&config)?,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        warnings,
        outputs,
    })
}

pub fn run(cli: &Cli) -> Result<RunReport> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Ipc(a) => cmd_ipc(a),
        Command::Regress(a) => cmd_regress(a),
        Command::Mgsem(a) => cmd_mgsem(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}
