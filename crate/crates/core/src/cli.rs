//! Command-line front end: `simulate`, `fit`, `filter`, `study` and `report`.
//!
//! Every subcommand writes `manifest.json` into its output directory before
//! doing any work and rewrites it with the produced files on completion.
//! Exit codes: 0 success, 1 I/O failure, 2 invalid configuration or data,
//! 3 an algorithm failed to converge (results are still written).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::PanelData;
use crate::em::{fit_em, EmConfig};
use crate::error::{Error, Result};
use crate::fit::{matrix_json, params_from_json, params_to_json, FitResult};
use crate::kalman::kalman_filter;
use crate::likelihood::panel_units;
use crate::mcmc::{sample_posterior, McmcConfig, ThetaSamples};
use crate::mkf::{run_filter, MkfConfig};
use crate::model::config::{matrix, ModelConfig, Rows};
use crate::model::{unit_system, EffectsDesign, ModelSpec, Params};
use crate::rng::derive_seed;
use crate::score::{fit_quasi_newton, observed_information, QuasiNewtonConfig};
use crate::simulate::{run_study, simulate_panel, Estimator, Missingness, SimConfig, StudyConfig};

pub const SEED_ENV: &str = "MESSM_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "messm", version, about = "Linear mixed-effects state space models: simulate, fit, filter")]
pub struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel from a run configuration.
    Simulate(SimulateArgs),
    /// Estimate Δ = (a, δ) from a panel.
    Fit(FitArgs),
    /// Recursive state and random-effect estimation with the mixture Kalman filter.
    Filter(FilterArgs),
    /// Repeated simulate-and-fit over an (m, T) grid.
    Study(StudyArgs),
    /// Print a parameter table from a fit result.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Run configuration (JSON, schema 1).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration and MESSM_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Em,
    Score,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value = "em")]
    pub method: MethodArg,
    /// Panel CSV (`individual,t,component,value,observed`).
    #[arg(long)]
    pub data: PathBuf,
    /// Model configuration (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Starting values `{"fixed": [...], "delta": [...]}`.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative parameter-change tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Moving-average window for Monte-Carlo estimates.
    #[arg(long)]
    pub window: Option<usize>,
    /// Retained posterior draws per iteration.
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    #[arg(long, default_value_t = 500)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 5)]
    pub thin: usize,
    /// Also compute the observed information at the estimate (information.json).
    #[arg(long)]
    pub information: bool,
    /// Write posterior draws of θ at the estimate to draws.csv.
    #[arg(long)]
    pub dump_draws: bool,
    /// Write the Kalman filter output at the estimate to kalman.json.
    #[arg(long)]
    pub dump_filter: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Parameter file, or a fit result containing `fixed` and `delta`.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON with a `theta` array (such as truth.json) for an oracle Kalman filter.
    #[arg(long)]
    pub oracle_theta: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub particles: usize,
    /// Kernel bandwidth h; shrinkage is sqrt(1 - h²).
    #[arg(long, default_value_t = 0.1)]
    pub bandwidth: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Study configuration (JSON, schema 1).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// fit.json written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// information.json written by `fit --information`.
    #[arg(long)]
    pub information: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    #[serde(default)]
    pub fixed: Vec<f64>,
    pub delta: Vec<f64>,
}

impl From<&ParamsConfig> for Params {
    fn from(p: &ParamsConfig) -> Self {
        Params::new(p.fixed.clone(), p.delta.clone())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MissingConfig {
    #[default]
    None,
    Interval {
        start: usize,
        end: usize,
    },
    Bernoulli {
        rate: f64,
    },
}

impl From<&MissingConfig> for Missingness {
    fn from(m: &MissingConfig) -> Self {
        match *m {
            MissingConfig::None => Missingness::None,
            MissingConfig::Interval { start, end } => Missingness::Interval { start, end },
            MissingConfig::Bernoulli { rate } => Missingness::Bernoulli { rate },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreSampleConfig {
    pub mean: Vec<f64>,
    pub cov: Rows,
}

impl PreSampleConfig {
    fn build(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((DVector::from_column_slice(&self.mean), matrix(&self.cov, "pre_sample.cov")?))
    }
}

/// `simulate` configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema: u32,
    pub model: ModelConfig,
    pub m: usize,
    pub n_time: usize,
    pub params: ParamsConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub missing: MissingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_sample: Option<PreSampleConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSettings {
    pub draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_acceptance: f64,
    pub initial_scale: f64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        let d = McmcConfig::default();
        McmcSettings {
            draws: d.draws,
            burn_in: d.burn_in,
            thin: d.thin,
            target_acceptance: d.target_acceptance,
            initial_scale: d.initial_scale,
        }
    }
}

impl McmcSettings {
    fn build(&self) -> McmcConfig {
        McmcConfig {
            draws: self.draws,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: 1,
            target_acceptance: self.target_acceptance,
            initial_scale: self.initial_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationSettings {
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorConfig {
    #[default]
    Em,
    Score,
}

/// `study` configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFileConfig {
    pub schema: u32,
    pub model: ModelConfig,
    pub truth: ParamsConfig,
    /// Starting values; the truth when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<ParamsConfig>,
    pub m_values: Vec<usize>,
    pub t_values: Vec<usize>,
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub missing: MissingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_sample: Option<PreSampleConfig>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub iterations: IterationSettings,
    #[serde(default)]
    pub mcmc: McmcSettings,
}

fn default_seed() -> u64 {
    1
}

fn check_schema(schema: u32) -> Result<()> {
    if schema != 1 {
        return Err(Error::Config(format!("unsupported configuration schema {schema} (expected 1)")));
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_value(path: &Path) -> Result<Value> {
    read_json(path)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// Seed precedence: command-line flag, then `MESSM_SEED`, then the configuration.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

/// Record of one invocation, kept next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub subcommand: String,
    pub config: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: String,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub status: String,
    pub outputs: Vec<String>,
}

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
}

impl Run {
    fn start(subcommand: &str, inputs: &[&Path], seed: Option<u64>, dir: &Path) -> Result<Run> {
        fs::create_dir_all(dir)?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let run = Run {
            manifest: RunManifest {
                schema: 1,
                subcommand: subcommand.into(),
                config: inputs.iter().map(|p| p.display().to_string()).collect(),
                seed,
                out_dir: dir.display().to_string(),
                version: env!("CARGO_PKG_VERSION").into(),
                timestamp,
                status: "running".into(),
                outputs: Vec::new(),
            },
            dir: dir.to_path_buf(),
        };
        run.save()?;
        Ok(run)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn save(&self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &serde_json::to_value(&self.manifest)?)
    }

    fn finish(mut self, status: &str) -> Result<()> {
        self.manifest.status = status.into();
        self.save()
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Csv(c) if c.is_io_error() => EXIT_IO,
        Error::Config(_)
        | Error::Data { .. }
        | Error::Dimension(_)
        | Error::Parameter(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Unsupported(_) => EXIT_CONFIG,
        Error::SingularInnovation { .. }
        | Error::NotPositiveDefinite(_)
        | Error::ZeroAcceptance { .. }
        | Error::DegenerateWeights { .. } => EXIT_NOT_CONVERGED,
        Error::Draw { source, .. } => exit_code(source),
    }
}

fn load_model(path: &Path, m: usize) -> Result<(ModelSpec, EffectsDesign)> {
    ModelConfig::load(path)?.build(m)
}

fn load_params(path: &Path, n_fixed: usize, n_delta: usize) -> Result<Params> {
    let p = params_from_json(&read_value(path)?)
        .ok_or_else(|| Error::Config(format!("{}: expected numeric `fixed` and `delta` arrays", path.display())))?;
    if p.fixed.len() != n_fixed || p.delta.len() != n_delta {
        return Err(Error::Dimension(format!(
            "{}: model needs {n_fixed} fixed effects and {n_delta} variance parameters, file has {} and {}",
            path.display(),
            p.fixed.len(),
            p.delta.len()
        )));
    }
    Ok(p)
}

fn simulate_cmd(args: &SimulateArgs) -> Result<i32> {
    let cfg: SimulateConfig = read_json(&args.config)?;
    check_schema(cfg.schema)?;
    let seed = resolve_seed(args.seed, cfg.seed)?;
    let mut run = Run::start("simulate", &[&args.config], Some(seed), &args.out)?;
    let (model, effects) = cfg.model.build(cfg.m)?;
    let sim = SimConfig {
        params: (&cfg.params).into(),
        m: cfg.m,
        n_time: cfg.n_time,
        seed,
        missing: (&cfg.missing).into(),
        pre_sample: cfg.pre_sample.as_ref().map(PreSampleConfig::build).transpose()?,
    };
    let (data, truth) = simulate_panel(&model, &effects, &sim)?;
    data.save_csv(&run.path("panel.csv"))?;
    write_json(&run.path("truth.json"), &truth.to_json())?;
    run.finish("ok")?;
    Ok(EXIT_OK)
}

fn posterior_at(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    mcmc: &McmcConfig,
    seed: u64,
) -> Result<ThetaSamples> {
    sample_posterior(data, model, effects, params, &McmcConfig { seed, ..*mcmc })
}

fn information_json(names: &[String], info: &crate::score::ObservedInformation) -> Value {
    json!({
        "schema": 1,
        "names": names,
        "matrix": matrix_json(&info.matrix),
        "positive_definite": info.std_errors.is_some(),
        "std_errors": info.std_errors.as_ref().map(|s| s.as_slice().to_vec()),
        "eigenvalues": info.eigenvalues.as_ref().map(|s| s.as_slice().to_vec()),
    })
}

/// Kalman filter output per unit, at the posterior mean of `θ` (or the known `θ`).
fn kalman_dump(
    data: &PanelData,
    model: &ModelSpec,
    effects: &EffectsDesign,
    params: &Params,
    samples: &ThetaSamples,
) -> Result<Value> {
    let n = samples.len() as f64;
    let theta_bar: Vec<DVector<f64>> = (0..data.m)
        .map(|i| samples.draws.iter().map(|d| &d[i]).fold(DVector::zeros(samples.draws[0][i].len()), |a, b| a + b) / n)
        .collect();
    let units = panel_units(data, model);
    let mut out = Vec::with_capacity(units.len());
    for unit in &units {
        let thetas: Vec<DVector<f64>> = unit.members.iter().map(|&i| theta_bar[i].clone()).collect();
        let sys = unit_system(model, effects, &thetas, params.delta.as_slice())?;
        let f = kalman_filter(&sys, &unit.obs)?;
        let mut v = f.to_json();
        v["members"] = json!(unit.members.iter().map(|i| i + 1).collect::<Vec<_>>());
        v["theta"] = json!(thetas.iter().map(|t| t.as_slice().to_vec()).collect::<Vec<_>>());
        out.push(v);
    }
    Ok(json!({ "schema": 1, "units": out }))
}

fn fit_cmd(args: &FitArgs) -> Result<i32> {
    let seed = resolve_seed(args.seed, 1)?;
    let mut run = Run::start("fit", &[&args.data, &args.model, &args.init], Some(seed), &args.out)?;
    let data = PanelData::load_csv(&args.data)?;
    let (model, effects) = load_model(&args.model, data.m)?;
    let start = load_params(&args.init, effects.n_fixed(), model.n_delta)?;
    let mcmc = McmcConfig {
        draws: args.draws,
        burn_in: args.burn_in,
        thin: args.thin,
        ..McmcConfig::default()
    };
    let fit: FitResult = match args.method {
        MethodArg::Em => {
            let d = EmConfig::default();
            let cfg = EmConfig {
                max_iter: args.max_iter.unwrap_or(d.max_iter),
                tol: args.tol.unwrap_or(d.tol),
                window: args.window.unwrap_or(d.window),
                mcmc,
                seed,
            };
            fit_em(&data, &model, &effects, &start, &cfg)?
        }
        MethodArg::Score => {
            let d = QuasiNewtonConfig::default();
            let cfg = QuasiNewtonConfig {
                max_iter: args.max_iter.unwrap_or(d.max_iter),
                tol: args.tol.unwrap_or(d.tol),
                window: args.window.unwrap_or(d.window),
                mcmc,
                seed,
                ..d
            };
            fit_quasi_newton(&data, &model, &effects, &start, &cfg)?
        }
    };
    write_json(&run.path("fit.json"), &fit.to_json())?;
    write_json(&run.path("params.json"), &params_to_json(&fit.names, &fit.params))?;
    fit.write_trace_csv(fs::File::create(run.path("trace.csv"))?)?;

    if args.information || args.dump_draws || args.dump_filter {
        let samples = posterior_at(&data, &model, &effects, &fit.params, &mcmc, derive_seed(seed, u64::MAX))?;
        if args.dump_draws {
            samples.write_csv(fs::File::create(run.path("draws.csv"))?)?;
        }
        if args.dump_filter {
            write_json(&run.path("kalman.json"), &kalman_dump(&data, &model, &effects, &fit.params, &samples)?)?;
        }
        if args.information {
            let info = observed_information(&data, &model, &effects, &fit.params, &samples)?;
            if info.std_errors.is_none() {
                log::warn!("observed information is not positive definite; eigenvalues reported instead of standard errors");
            }
            write_json(&run.path("information.json"), &information_json(&fit.names, &info))?;
        }
    }
    if fit.converged {
        run.finish("ok")?;
        Ok(EXIT_OK)
    } else {
        log::warn!("{}: {}", fit.method.as_str(), fit.message);
        run.finish("not_converged")?;
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn filter_cmd(args: &FilterArgs) -> Result<i32> {
    let seed = resolve_seed(args.seed, 1)?;
    let mut inputs: Vec<&Path> = vec![&args.data, &args.model, &args.params];
    if let Some(p) = &args.oracle_theta {
        inputs.push(p);
    }
    let mut run = Run::start("filter", &inputs, Some(seed), &args.out)?;
    let data = PanelData::load_csv(&args.data)?;
    let (model, effects) = load_model(&args.model, data.m)?;
    let params = load_params(&args.params, effects.n_fixed(), model.n_delta)?;
    let oracle = match &args.oracle_theta {
        Some(p) => {
            let theta = crate::simulate::Truth::theta_from_json(&read_value(p)?)
                .ok_or_else(|| Error::Config(format!("{}: expected a numeric `theta` array", p.display())))?;
            if theta.len() != data.m {
                return Err(Error::Dimension(format!("oracle θ has {} rows for {} individuals", theta.len(), data.m)));
            }
            Some(theta)
        }
        None => None,
    };
    if !(args.bandwidth > 0.0 && args.bandwidth < 1.0) {
        return Err(Error::Config(format!("bandwidth {} must lie in (0, 1)", args.bandwidth)));
    }
    let cfg = MkfConfig {
        particles: args.particles,
        h: args.bandwidth,
        seed,
    };
    let result = run_filter(&data, &model, &effects, &params, &cfg, oracle.as_deref())?;
    result.write_csv(fs::File::create(run.path("trajectory.csv"))?)?;
    write_json(&run.path("mse.json"), &result.mse_json())?;
    run.finish("ok")?;
    Ok(EXIT_OK)
}

fn study_cmd(args: &StudyArgs) -> Result<i32> {
    let cfg: StudyFileConfig = read_json(&args.config)?;
    check_schema(cfg.schema)?;
    let seed = resolve_seed(args.seed, cfg.seed)?;
    let mut run = Run::start("study", &[&args.config], Some(seed), &args.out)?;
    if cfg.m_values.is_empty() || cfg.t_values.is_empty() {
        return Err(Error::Config("`m_values` and `t_values` must be non-empty".into()));
    }
    let mcmc = cfg.mcmc.build();
    let it = cfg.iterations;
    let em = EmConfig::default();
    let qn = QuasiNewtonConfig::default();
    let truth: Params = (&cfg.truth).into();
    let study = StudyConfig {
        start: cfg.start.as_ref().map_or_else(|| truth.clone(), Into::into),
        truth,
        m_values: cfg.m_values.clone(),
        t_values: cfg.t_values.clone(),
        replications: cfg.replications,
        seed,
        missing: (&cfg.missing).into(),
        pre_sample: cfg.pre_sample.as_ref().map(PreSampleConfig::build).transpose()?,
        estimator: match cfg.estimator {
            EstimatorConfig::Em => Estimator::Em,
            EstimatorConfig::Score => Estimator::Score,
        },
        em: EmConfig {
            max_iter: it.max_iter.unwrap_or(em.max_iter),
            tol: it.tol.unwrap_or(em.tol),
            window: it.window.unwrap_or(em.window),
            mcmc,
            seed,
        },
        quasi_newton: QuasiNewtonConfig {
            max_iter: it.max_iter.unwrap_or(qn.max_iter),
            tol: it.tol.unwrap_or(qn.tol),
            window: it.window.unwrap_or(qn.window),
            mcmc,
            seed,
            ..qn
        },
    };
    // validate the model once before spending time on replications
    cfg.model.build(cfg.m_values[0])?;
    let table = run_study(|m| cfg.model.build(m), &study)?;
    table.write_csv(fs::File::create(run.path("table.csv"))?)?;
    let cells: Vec<Value> = table
        .cells
        .iter()
        .map(|c| {
            json!({
                "m": c.m,
                "T": c.n_time,
                "failures": c.failures,
                "converged": c.converged,
                "estimates": c.estimates.iter().map(Params::to_vec).collect::<Vec<_>>(),
            })
        })
        .collect();
    write_json(&run.path("replications.json"), &json!({ "schema": 1, "names": table.names, "cells": cells }))?;
    run.finish("ok")?;
    Ok(EXIT_OK)
}

fn report_cmd(args: &ReportArgs) -> Result<i32> {
    let fit = read_value(&args.fit)?;
    let names: Vec<String> = fit
        .get("names")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
        .ok_or_else(|| Error::Config(format!("{}: missing `names`", args.fit.display())))?;
    let estimate = params_from_json(&fit)
        .ok_or_else(|| Error::Config(format!("{}: missing `fixed`/`delta`", args.fit.display())))?
        .to_vec();
    let se: Option<Vec<Option<f64>>> = match &args.information {
        Some(p) => read_value(p)?
            .get("std_errors")
            .and_then(Value::as_array)
            .map(|a| a.iter().map(Value::as_f64).collect()),
        None => None,
    };
    println!(
        "method {}  converged {}  iterations {}",
        fit["method"].as_str().unwrap_or("?"),
        fit["converged"],
        fit["iterations"]
    );
    println!("{:<12} {:>14} {:>14}", "parameter", "estimate", "std. error");
    for (k, (n, v)) in names.iter().zip(&estimate).enumerate() {
        let s = se
            .as_ref()
            .and_then(|s| s.get(k).copied().flatten())
            .map_or("-".to_string(), |s| format!("{s:.6}"));
        println!("{n:<12} {v:>14.6} {s:>14}");
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Filter(a) => filter_cmd(a),
        Command::Study(a) => study_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn mark_failed(cli: &Cli) {
    let dir = match &cli.command {
        Command::Simulate(a) => &a.out,
        Command::Fit(a) => &a.out,
        Command::Filter(a) => &a.out,
        Command::Study(a) => &a.out,
        Command::Report(_) => return,
    };
    let path = dir.join("manifest.json");
    if let Ok(Ok(mut m)) = fs::read_to_string(&path).map(|s| serde_json::from_str::<RunManifest>(&s)) {
        m.status = "failed".into();
        if let Ok(v) = serde_json::to_value(&m) {
            let _ = write_json(&path, &v);
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).try_init();
    let outcome = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::Config(format!("cannot build a pool of {n} threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            mark_failed(&cli);
            exit_code(&e)
        }
    }
}
