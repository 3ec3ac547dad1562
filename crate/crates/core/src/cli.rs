//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when a
//! `verify` assertion fails, 3 when a command fails at run time (I/O,
//! divergence).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SimError};
use crate::experiments::{self, DeviationSetup, ExperimentReport, Scenario, SweepGrid, TrialOptions};
use crate::io;
use crate::task::accuracy_to_alpha;
use crate::theory::{prescribe, Certificate};
use crate::trainer::{train, Sampler, TrainConfig, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ASSERTION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const WORKERS_ENV: &str = "DELTA_SIM_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "delta-sim", version, about = "Delta-learning simulator for logistic regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample one instance and print its certificate.
    Certify(Opts),
    /// Sample one instance and train the student.
    Train(Opts),
    /// Run a grid of scenarios; list-valued flags take comma-separated values.
    Sweep(Opts),
    /// Run a named verification experiment.
    Verify {
        #[arg(value_enum)]
        target: VerifyTarget,
        #[command(flatten)]
        opts: Opts,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifyTarget {
    Gradient,
    Loss,
    Ray,
    Deviation,
    Remark2,
    Theorem1,
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Sgd,
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerArg {
    Dense,
    Aggregated,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Dense => Sampler::Dense,
            SamplerArg::Aggregated => Sampler::Aggregated,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// JSON file whose keys mirror the flag names with underscores.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub d: Vec<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alpha0: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub acc0: Vec<f64>,
    #[arg(long = "alpha-c", value_delimiter = ',', allow_hyphen_values = true)]
    pub alpha_c: Vec<f64>,
    #[arg(long = "acc-c", value_delimiter = ',')]
    pub acc_c: Vec<f64>,
    #[arg(long = "alpha-r", value_delimiter = ',', allow_hyphen_values = true)]
    pub alpha_r: Vec<f64>,
    #[arg(long = "acc-r", value_delimiter = ',')]
    pub acc_r: Vec<f64>,
    /// Accuracies are given in percent.
    #[arg(long)]
    pub percent: bool,
    #[arg(long = "theta0-norm")]
    pub theta0_norm: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub delta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub batch: Vec<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_delimiter = ',')]
    pub trials: Vec<usize>,
    /// Monte Carlo sample count (gradient and loss checks).
    #[arg(long)]
    pub samples: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON output path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV output path (trial rows or training trace).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long = "record-every")]
    pub record_every: Option<u64>,
    /// Also train with the teachers swapped.
    #[arg(long)]
    pub reversed: bool,
}

/// A scalar or a list in the config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            Self::One(x) => vec![x],
            Self::Many(v) => v,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub d: Option<OneOrMany<usize>>,
    pub alpha0: Option<OneOrMany<f64>>,
    pub acc0: Option<OneOrMany<f64>>,
    pub alpha_c: Option<OneOrMany<f64>>,
    pub acc_c: Option<OneOrMany<f64>>,
    pub alpha_r: Option<OneOrMany<f64>>,
    pub acc_r: Option<OneOrMany<f64>>,
    pub percent: Option<bool>,
    pub theta0_norm: Option<f64>,
    pub delta: Option<OneOrMany<f64>>,
    pub batch: Option<OneOrMany<u64>>,
    pub eta: Option<f64>,
    pub steps: Option<u64>,
    pub mode: Option<ModeArg>,
    pub trials: Option<OneOrMany<usize>>,
    pub samples: Option<u64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub workers: Option<usize>,
    pub sampler: Option<SamplerArg>,
    pub record_every: Option<u64>,
    pub reversed: Option<bool>,
}

/// Merged configuration: flags over file values over defaults. Alignments
/// are already converted from accuracies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub d: Vec<usize>,
    pub alpha0: Vec<f64>,
    pub alpha_c: Vec<f64>,
    pub alpha_r: Vec<f64>,
    pub theta0_norm: f64,
    pub delta: Vec<f64>,
    pub batch: Vec<u64>,
    pub eta: Option<f64>,
    pub steps: Option<u64>,
    pub mode: ModeArg,
    pub trials: Vec<usize>,
    pub samples: Option<u64>,
    pub seed: u64,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub csv: Option<PathBuf>,
    #[serde(skip)]
    pub workers: usize,
    pub sampler: Option<SamplerArg>,
    pub record_every: Option<u64>,
    pub reversed: bool,
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Io(_) | SimError::Csv(_) | SimError::Divergence { .. } => EXIT_RUNTIME,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn pick<T>(flag: Vec<T>, file: Option<OneOrMany<T>>) -> Vec<T> {
    if flag.is_empty() {
        file.map(OneOrMany::into_vec).unwrap_or_default()
    } else {
        flag
    }
}

/// Resolves one role's alignment given its cosine and accuracy forms.
fn resolve_role(
    role: &str,
    alpha_flag: Vec<f64>,
    acc_flag: Vec<f64>,
    alpha_file: Option<OneOrMany<f64>>,
    acc_file: Option<OneOrMany<f64>>,
    percent: bool,
) -> CliResult<Vec<f64>> {
    let conflict = || CliError::usage(format!("both --alpha{role} and --acc{role} given"));
    let (alpha, acc) = if !alpha_flag.is_empty() || !acc_flag.is_empty() {
        (alpha_flag, acc_flag)
    } else {
        (alpha_file.map(OneOrMany::into_vec).unwrap_or_default(), acc_file.map(OneOrMany::into_vec).unwrap_or_default())
    };
    match (alpha.is_empty(), acc.is_empty()) {
        (false, false) => Err(conflict()),
        (false, true) => Ok(alpha),
        (true, false) => acc
            .into_iter()
            .map(|a| accuracy_to_alpha(if percent { a / 100.0 } else { a }).map_err(CliError::from))
            .collect(),
        (true, true) => Ok(Vec::new()),
    }
}

fn read_file_config(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
}

/// Merges flags, the optional config file, the environment and defaults.
pub fn resolve(opts: Opts, env_workers: Option<String>) -> CliResult<CliConfig> {
    let file = match &opts.config {
        Some(p) => read_file_config(p)?,
        None => FileConfig::default(),
    };
    let percent = opts.percent || file.percent.unwrap_or(false);
    let alpha0 = resolve_role("0", opts.alpha0, opts.acc0, file.alpha0, file.acc0, percent)?;
    let alpha_c = resolve_role("-c", opts.alpha_c, opts.acc_c, file.alpha_c, file.acc_c, percent)?;
    let alpha_r = resolve_role("-r", opts.alpha_r, opts.acc_r, file.alpha_r, file.acc_r, percent)?;
    let workers = match env_workers.filter(|s| !s.is_empty()) {
        Some(s) => {
            s.trim().parse::<usize>().map_err(|_| CliError::usage(format!("{WORKERS_ENV}={s} is not a count")))?
        }
        None => opts.workers.or(file.workers).unwrap_or(1),
    };
    if workers == 0 {
        return Err(CliError::usage("workers must be >= 1"));
    }
    let delta = pick(opts.delta, file.delta);
    Ok(CliConfig {
        d: pick(opts.d, file.d),
        alpha0,
        alpha_c,
        alpha_r,
        theta0_norm: opts.theta0_norm.or(file.theta0_norm).unwrap_or(1.0),
        delta: if delta.is_empty() { vec![0.1] } else { delta },
        batch: pick(opts.batch, file.batch),
        eta: opts.eta.or(file.eta),
        steps: opts.steps.or(file.steps),
        mode: opts.mode.or(file.mode).unwrap_or(ModeArg::Sgd),
        trials: pick(opts.trials, file.trials),
        samples: opts.samples.or(file.samples),
        seed: opts.seed.or(file.seed).unwrap_or(0),
        out: opts.out.or(file.out),
        csv: opts.csv.or(file.csv),
        workers,
        sampler: opts.sampler.or(file.sampler),
        record_every: opts.record_every.or(file.record_every),
        reversed: opts.reversed || file.reversed.unwrap_or(false),
    })
}

fn single<T: Copy + std::fmt::Debug>(name: &str, values: &[T], default: Option<T>) -> CliResult<T> {
    match values {
        [] => default.ok_or_else(|| CliError::usage(format!("--{name} is required"))),
        [x] => Ok(*x),
        _ => Err(CliError::usage(format!("--{name} takes one value outside sweep, got {values:?}"))),
    }
}

/// Scenario with per-field defaults (`None` means required).
struct ScenarioDefaults {
    d: Option<usize>,
    alpha0: Option<f64>,
    alpha_c: Option<f64>,
    alpha_r: Option<f64>,
}

const REQUIRED: ScenarioDefaults = ScenarioDefaults { d: None, alpha0: None, alpha_c: None, alpha_r: None };

fn scenario_of(cfg: &CliConfig, defaults: ScenarioDefaults) -> CliResult<Scenario> {
    let s = Scenario {
        dim: single("d", &cfg.d, defaults.d)?,
        alpha0: single("alpha0/--acc0", &cfg.alpha0, defaults.alpha0)?,
        alpha_c: single("alpha-c/--acc-c", &cfg.alpha_c, defaults.alpha_c)?,
        alpha_r: single("alpha-r/--acc-r", &cfg.alpha_r, defaults.alpha_r)?,
        theta0_norm: cfg.theta0_norm,
        delta: single("delta", &cfg.delta, Some(0.1))?,
        batch: match cfg.batch.as_slice() {
            [] => None,
            [b] => Some(*b),
            _ => return Err(CliError::usage("--batch takes one value outside sweep")),
        },
    };
    s.validate()?;
    Ok(s)
}

#[derive(Serialize)]
struct CertifyReport<'a> {
    schema_version: u32,
    name: &'static str,
    config: Value,
    #[serde(flatten)]
    certificate: &'a Certificate,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    schema_version: u32,
    name: &'static str,
    config: Value,
    certificate: &'a Certificate,
    mode: ModeArg,
    eta: f64,
    steps: u64,
    initial_cosine: f64,
    final_cosine: f64,
    gain: f64,
    diverged_at: Option<u64>,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    schema_version: u32,
    name: &'static str,
    config: Value,
    cells: &'a [ExperimentReport],
}

fn echo(cfg: &CliConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn certify(cfg: &CliConfig) -> CliResult<i32> {
    let s = scenario_of(cfg, REQUIRED)?;
    let (task, theta0, teachers) = experiments::sample_instance(&s, cfg.seed)?;
    let cert = prescribe(&theta0, &teachers, &task, s.batch(), s.delta)?;
    let report =
        CertifyReport { schema_version: io::SCHEMA_VERSION, name: "certify", config: echo(cfg), certificate: &cert };
    io::emit_json(&report, cfg.out.as_deref())?;
    Ok(EXIT_OK)
}

fn train_cmd(cfg: &CliConfig) -> CliResult<i32> {
    let s = scenario_of(cfg, REQUIRED)?;
    let (task, theta0, teachers) = experiments::sample_instance(&s, cfg.seed)?;
    let cert = prescribe(&theta0, &teachers, &task, s.batch(), s.delta)?;
    let eta = cfg.eta.or(cert.eta).ok_or_else(|| {
        CliError::usage(format!("C1 violated (kappa = {}); pass --eta and --steps to train anyway", cert.kappa))
    })?;
    let steps = cfg.steps.or(cert.steps).ok_or_else(|| CliError::usage("--steps is required when C1 fails"))?;
    let tc = TrainConfig {
        mode: match cfg.mode {
            ModeArg::Sgd => TrainMode::Empirical,
            ModeArg::Population => TrainMode::Population,
        },
        eta,
        steps,
        batch: s.batch(),
        record_every: cfg.record_every.unwrap_or_else(|| steps.div_ceil(1000).max(1)),
        seed: cfg.seed,
        sampler: cfg.sampler.unwrap_or(SamplerArg::Aggregated).into(),
    };
    let mut rng = crate::geometry::RngStream::new(cfg.seed, 0).fork(3);
    let (trace, diverged_at) = match train(&theta0, &teachers, &task, &tc, &mut rng) {
        Ok(t) => (t, None),
        Err(SimError::Divergence { step, trace }) => (*trace, Some(step)),
        Err(e) => return Err(e.into()),
    };
    if let Some(path) = &cfg.csv {
        io::emit_trace_csv(&trace, path)?;
    }
    let first = trace.points.first().map(|p| p.cosine).unwrap_or(f64::NAN);
    let last = trace.points.last().map(|p| p.cosine).unwrap_or(f64::NAN);
    let report = TrainReport {
        schema_version: io::SCHEMA_VERSION,
        name: "train",
        config: echo(cfg),
        certificate: &cert,
        mode: cfg.mode,
        eta,
        steps,
        initial_cosine: first,
        final_cosine: last,
        gain: trace.gain,
        diverged_at,
    };
    io::emit_json(&report, cfg.out.as_deref())?;
    Ok(if diverged_at.is_some() { EXIT_RUNTIME } else { EXIT_OK })
}

fn required_list<T: Clone>(name: &str, v: &[T]) -> CliResult<Vec<T>> {
    if v.is_empty() {
        return Err(CliError::usage(format!("--{name} is required")));
    }
    Ok(v.to_vec())
}

fn sweep_cmd(cfg: &CliConfig) -> CliResult<i32> {
    let grid = SweepGrid {
        d: required_list("d", &cfg.d)?,
        alpha0: required_list("alpha0/--acc0", &cfg.alpha0)?,
        alpha_c: required_list("alpha-c/--acc-c", &cfg.alpha_c)?,
        alpha_r: required_list("alpha-r/--acc-r", &cfg.alpha_r)?,
        delta: cfg.delta.clone(),
        batch: cfg.batch.clone(),
        trials: if cfg.trials.is_empty() { vec![100] } else { cfg.trials.clone() },
        theta0_norm: cfg.theta0_norm,
    };
    let opts = TrialOptions {
        population: true,
        sgd: cfg.mode == ModeArg::Sgd,
        reversed: cfg.reversed,
        sampler: cfg.sampler.unwrap_or(SamplerArg::Aggregated).into(),
        eta: cfg.eta,
        steps: cfg.steps,
    };
    let out = experiments::sweep(&grid, &opts, cfg.seed, cfg.workers)?;
    if let Some(path) = &cfg.csv {
        io::emit_trials_csv(&out.rows, path)?;
    }
    let report =
        SweepReport { schema_version: io::SCHEMA_VERSION, name: "sweep", config: echo(cfg), cells: &out.reports };
    io::emit_json(&report, cfg.out.as_deref())?;
    Ok(EXIT_OK)
}

/// Student, chosen and rejected at 80%, 70% and 60% accuracy.
fn acc_80_70_60() -> ScenarioDefaults {
    let a = |acc: f64| accuracy_to_alpha(acc).ok();
    ScenarioDefaults { d: None, alpha0: a(0.8), alpha_c: a(0.7), alpha_r: a(0.6) }
}

fn with_dim(mut defaults: ScenarioDefaults, d: usize) -> ScenarioDefaults {
    defaults.d = Some(d);
    defaults
}

fn finish_report(cfg: &CliConfig, mut report: ExperimentReport) -> CliResult<i32> {
    report.config["cli"] = echo(cfg);
    io::emit_json(&report, cfg.out.as_deref())?;
    Ok(if report.passed { EXIT_OK } else { EXIT_ASSERTION })
}

fn verify_cmd(target: VerifyTarget, cfg: &CliConfig) -> CliResult<i32> {
    let trials = |default: usize| single("trials", &cfg.trials, Some(default));
    let (seed, workers) = (cfg.seed, cfg.workers);
    let report = match target {
        VerifyTarget::Gradient => {
            let d = single("d", &cfg.d, Some(8))?;
            experiments::verify_gradient(d, cfg.samples.unwrap_or(1_000_000), seed, workers)?
        }
        VerifyTarget::Loss => {
            let d = single("d", &cfg.d, Some(32))?;
            let n = cfg.samples.unwrap_or(100_000) as usize;
            experiments::verify_loss(d, trials(20)?, n, seed, workers)?
        }
        VerifyTarget::Ray => experiments::verify_ray(trials(1000)?, seed, workers)?,
        VerifyTarget::Population => {
            let d = single("d", &cfg.d, Some(256))?;
            experiments::verify_population(d, trials(200)?, seed, workers)?
        }
        VerifyTarget::Deviation => {
            let setup = DeviationSetup {
                scenario: scenario_of(cfg, with_dim(acc_80_70_60(), 64))?,
                eta: cfg.eta.unwrap_or(1e-3),
                steps: cfg.steps.unwrap_or(1000),
                trials: trials(100)?,
                sampler: cfg.sampler.unwrap_or(SamplerArg::Dense).into(),
            };
            experiments::verify_deviation(&setup, seed, workers)?
        }
        VerifyTarget::Remark2 => {
            let s = scenario_of(cfg, with_dim(acc_80_70_60(), 2048))?;
            let c = acc_80_70_60();
            let canonical = Some(s.alpha0) == c.alpha0
                && Some(s.alpha_c) == c.alpha_c
                && Some(s.alpha_r) == c.alpha_r
                && s.delta == 0.1
                && s.theta0_norm == 1.0;
            let expected = canonical.then_some(experiments::REMARK2_D_STAR);
            experiments::verify_remark2(&s, expected, trials(1000)?, seed, workers)?
        }
        VerifyTarget::Theorem1 => {
            let s = scenario_of(cfg, with_dim(acc_80_70_60(), 128))?;
            let sampler = cfg.sampler.unwrap_or(SamplerArg::Aggregated).into();
            let (report, rows) = experiments::verify_theorem1(&s, trials(100)?, sampler, seed, workers)?;
            if let Some(path) = &cfg.csv {
                io::emit_trials_csv(&rows, path)?;
            }
            report
        }
    };
    finish_report(cfg, report)
}

/// Runs an already parsed command and returns the exit code.
pub fn execute(cli: Cli, env_workers: Option<String>) -> CliResult<i32> {
    match cli.command {
        Command::Certify(o) => certify(&resolve(o, env_workers)?),
        Command::Train(o) => train_cmd(&resolve(o, env_workers)?),
        Command::Sweep(o) => sweep_cmd(&resolve(o, env_workers)?),
        Command::Verify { target, opts } => verify_cmd(target, &resolve(opts, env_workers)?),
    }
}

/// Parses `args`, runs the command and reports errors on standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, std::env::var(WORKERS_ENV).ok()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Result-returning wrapper for library callers that only need the merged config.
pub fn parse_config<I, T>(args: I, env_workers: Option<String>) -> Result<CliConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| SimError::InvalidArgument(e.to_string()))?;
    let opts = match cli.command {
        Command::Certify(o) | Command::Train(o) | Command::Sweep(o) => o,
        Command::Verify { opts, .. } => opts,
    };
    resolve(opts, env_workers).map_err(|e| SimError::InvalidArgument(e.message))
}
