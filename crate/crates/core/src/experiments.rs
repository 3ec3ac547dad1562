//! Seeded Monte Carlo trials, sweeps and the named verification runs.
//!
//! Every trial owns an RNG stream derived from its seed alone, and results
//! are collected in index order, so outputs do not depend on the number of
//! worker threads.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, Result, SimError};
use crate::geometry::{derive_seed, sample_at_cosine, sample_gaussian, sample_unit_sphere, DenseVector, RngStream};
use crate::task::{accuracy_to_alpha, make_pair, sample_teacher_pair, zo_loss_exact, zo_loss_mc, Task, TeacherPair};
use crate::theory::{self, prescribe};
use crate::trainer::{self, population_direction, train, Sampler, TrainConfig, TrainMode, SQRT_TWO_PI};

pub const WILSON_Z: f64 = 1.959_963_984_540_054;

// Stream indices forked from a trial's seed.
const STREAM_TASK: u64 = 0;
const STREAM_STUDENT: u64 = 1;
const STREAM_TEACHERS: u64 = 2;
const STREAM_SGD: u64 = 3;
const STREAM_REVERSED: u64 = 4;

/// One point of the problem space: dimension and the three alignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dim: usize,
    pub alpha0: f64,
    pub alpha_c: f64,
    pub alpha_r: f64,
    pub theta0_norm: f64,
    pub delta: f64,
    /// Defaults to `dim`.
    pub batch: Option<u64>,
}

impl Scenario {
    /// The 80/70/60 accuracy setting used by several verification runs.
    pub fn from_accuracies(dim: usize, acc0: f64, acc_c: f64, acc_r: f64, delta: f64) -> Result<Self> {
        let s = Self {
            dim,
            alpha0: accuracy_to_alpha(acc0)?,
            alpha_c: accuracy_to_alpha(acc_c)?,
            alpha_r: accuracy_to_alpha(acc_r)?,
            theta0_norm: 1.0,
            delta,
            batch: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(invalid(format!("dimension {} must be >= 2", self.dim)));
        }
        for a in [self.alpha0, self.alpha_c, self.alpha_r] {
            if !(-1.0..=1.0).contains(&a) {
                return Err(invalid(format!("cosine {a} outside [-1, 1]")));
            }
        }
        if self.alpha_c <= self.alpha_r {
            return Err(SimError::NoPerformanceDelta { alpha_c: self.alpha_c, alpha_r: self.alpha_r });
        }
        if !(self.theta0_norm > 0.0 && self.theta0_norm.is_finite()) {
            return Err(invalid("theta0_norm must be positive and finite"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta {} outside (0, 1)", self.delta)));
        }
        if self.batch == Some(0) {
            return Err(invalid("batch must be >= 1"));
        }
        Ok(())
    }

    pub fn batch(&self) -> u64 {
        self.batch.unwrap_or(self.dim as u64)
    }

    fn echo(&self) -> Value {
        json!({
            "d": self.dim,
            "alpha0": self.alpha0,
            "alpha_c": self.alpha_c,
            "alpha_r": self.alpha_r,
            "theta0_norm": self.theta0_norm,
            "delta": self.delta,
            "batch": self.batch(),
        })
    }
}

/// Which dynamics a trial runs once C1 holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOptions {
    pub population: bool,
    pub sgd: bool,
    pub reversed: bool,
    pub sampler: Sampler,
    pub eta: Option<f64>,
    pub steps: Option<u64>,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self { population: true, sgd: true, reversed: false, sampler: Sampler::Aggregated, eta: None, steps: None }
    }
}

impl TrialOptions {
    pub fn certificate_only() -> Self {
        Self { population: false, sgd: false, ..Self::default() }
    }

    fn echo(&self) -> Value {
        json!({
            "population": self.population,
            "sgd": self.sgd,
            "reversed": self.reversed,
            "sampler": self.sampler,
            "eta": self.eta,
            "steps": self.steps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial_id: u64,
    pub seed: u64,
    #[serde(rename = "d")]
    pub dim: usize,
    pub alpha0: f64,
    pub alpha_c: f64,
    pub alpha_r: f64,
    pub kappa: f64,
    pub c1_holds: bool,
    pub v_delta_norm_sq: f64,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
    pub steps: Option<u64>,
    pub gain_population: Option<f64>,
    pub gain_sgd: Option<f64>,
    pub gain_sgd_reversed: Option<f64>,
    /// `gain_sgd >= Γ/2`.
    pub improved: bool,
    /// `gain_sgd > 0`.
    pub improved_strict: bool,
    pub diverged: bool,
    pub notes: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Student at cosine `alpha0` with norm `theta0_norm`, teachers from their slices.
pub fn sample_instance(scenario: &Scenario, seed: u64) -> Result<(Task, DenseVector, TeacherPair)> {
    let root = RngStream::new(seed, 0);
    let task = Task::sample(scenario.dim, &mut root.fork(STREAM_TASK))?;
    let theta0 = sample_at_cosine(task.theta_star(), scenario.alpha0, &mut root.fork(STREAM_STUDENT))?
        .scaled(scenario.theta0_norm);
    let teachers = sample_teacher_pair(&task, scenario.alpha_c, scenario.alpha_r, &mut root.fork(STREAM_TEACHERS))?;
    Ok((task, theta0, teachers))
}

fn run_gain(
    theta0: &DenseVector,
    teachers: &TeacherPair,
    task: &Task,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    notes: &mut Vec<String>,
    label: &str,
) -> Result<Option<f64>> {
    match train(theta0, teachers, task, cfg, rng) {
        Ok(trace) => Ok(Some(trace.gain)),
        Err(SimError::Divergence { step, .. }) => {
            notes.push(format!("{label} run diverged at step {step}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Samples an instance, certifies it and, if C1 holds, trains it.
pub fn run_trial(scenario: &Scenario, opts: &TrialOptions, trial_id: u64, seed: u64) -> Result<TrialResult> {
    scenario.validate()?;
    let start = Instant::now();
    let (task, theta0, teachers) = sample_instance(scenario, seed)?;
    let batch = scenario.batch();
    let cert = prescribe(&theta0, &teachers, &task, batch, scenario.delta)?;
    let mut result = TrialResult {
        trial_id,
        seed,
        dim: scenario.dim,
        alpha0: scenario.alpha0,
        alpha_c: scenario.alpha_c,
        alpha_r: scenario.alpha_r,
        kappa: cert.kappa,
        c1_holds: cert.c1_holds,
        v_delta_norm_sq: cert.v_delta_norm_sq,
        gamma: cert.gamma,
        eta: None,
        steps: None,
        gain_population: None,
        gain_sgd: None,
        gain_sgd_reversed: None,
        improved: false,
        improved_strict: false,
        diverged: false,
        notes: String::new(),
        wall_time_s: 0.0,
    };
    let mut notes = Vec::new();
    if cert.c1_holds && (opts.population || opts.sgd) {
        let eta = opts.eta.or(cert.eta).ok_or_else(|| invalid("no learning rate"))?;
        let steps = opts.steps.or(cert.steps).ok_or_else(|| invalid("no step count"))?;
        result.eta = Some(eta);
        result.steps = Some(steps);
        let mut cfg = TrainConfig {
            mode: TrainMode::Population,
            eta,
            steps,
            batch,
            record_every: steps,
            seed,
            sampler: opts.sampler,
        };
        let root = RngStream::new(seed, 0);
        if opts.population {
            let mut rng = root.fork(STREAM_SGD);
            result.gain_population = run_gain(&theta0, &teachers, &task, &cfg, &mut rng, &mut notes, "population")?;
        }
        if opts.sgd {
            cfg.mode = TrainMode::Empirical;
            let mut rng = root.fork(STREAM_SGD);
            result.gain_sgd = run_gain(&theta0, &teachers, &task, &cfg, &mut rng, &mut notes, "sgd")?;
            result.diverged = result.gain_sgd.is_none();
            if opts.reversed {
                let mut rng = root.fork(STREAM_REVERSED);
                let swapped = teachers.swapped();
                result.gain_sgd_reversed = run_gain(&theta0, &swapped, &task, &cfg, &mut rng, &mut notes, "reversed")?;
            }
            if let (Some(g), Some(gamma)) = (result.gain_sgd, cert.gamma) {
                result.improved = g >= gamma / 2.0;
                result.improved_strict = g > 0.0;
            }
        }
    } else if !cert.c1_holds {
        notes.push("C1 violated; not trained".to_string());
    }
    result.notes = notes.join("; ");
    result.wall_time_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs `f(0..n)` on `workers` threads and returns the results in index order.
pub fn run_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers == 0 {
        return Err(invalid("workers must be >= 1"));
    }
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Wilson score interval for `successes` out of `n`; `(0, 1)` when `n = 0`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let low = (center - half).clamp(0.0, 1.0).min(p);
    let high = (center + half).clamp(0.0, 1.0).max(p);
    (low, high)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">")]
    Above,
    #[serde(rename = "<")]
    Below,
}

/// One assertion of a verification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, comparison: Comparison, threshold: f64) -> Self {
        let passed = match comparison {
            Comparison::AtLeast => value >= threshold,
            Comparison::AtMost => value <= threshold,
            Comparison::Above => value > threshold,
            Comparison::Below => value < threshold,
        };
        Self { name: name.to_string(), value, comparison, threshold, passed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub config: Value,
    pub n_trials: u64,
    pub n_c1: u64,
    pub n_improved: u64,
    pub n_improved_strict: u64,
    pub fraction: f64,
    /// What `fraction` counts: `improved/c1` or `c1/trials` etc.
    pub fraction_basis: String,
    pub wilson_ci: (f64, f64),
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub notes: String,
}

impl ExperimentReport {
    fn new(name: &str, config: Value) -> Self {
        Self {
            schema_version: crate::io::SCHEMA_VERSION,
            name: name.to_string(),
            config,
            n_trials: 0,
            n_c1: 0,
            n_improved: 0,
            n_improved_strict: 0,
            fraction: 0.0,
            fraction_basis: "improved/c1".to_string(),
            wilson_ci: (0.0, 1.0),
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            passed: true,
            notes: String::new(),
        }
    }

    /// Sets `fraction = successes/n` and its Wilson interval.
    fn set_fraction(&mut self, successes: u64, n: u64, basis: &str) {
        self.fraction = if n == 0 { 0.0 } else { successes as f64 / n as f64 };
        self.wilson_ci = wilson_interval(successes, n, WILSON_Z);
        self.fraction_basis = basis.to_string();
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn check(&mut self, check: Check) {
        self.passed &= check.passed;
        self.checks.push(check);
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Counts over a set of trials.
    pub fn from_trials(name: &str, config: Value, trials: &[TrialResult]) -> Self {
        let mut r = Self::new(name, config);
        r.n_trials = trials.len() as u64;
        r.n_c1 = trials.iter().filter(|t| t.c1_holds).count() as u64;
        r.n_improved = trials.iter().filter(|t| t.improved).count() as u64;
        r.n_improved_strict = trials.iter().filter(|t| t.improved_strict).count() as u64;
        r.set_fraction(r.n_improved, r.n_c1, "improved/c1");
        r.metric("c1_rate", if r.n_trials == 0 { 0.0 } else { r.n_c1 as f64 / r.n_trials as f64 });
        let c1: Vec<&TrialResult> = trials.iter().filter(|t| t.c1_holds).collect();
        if let Some(m) = mean(c1.iter().filter_map(|t| t.gain_sgd)) {
            r.metric("mean_gain_sgd", m);
        }
        if let Some(m) = mean(c1.iter().filter_map(|t| t.gain_population)) {
            r.metric("mean_gain_population", m);
        }
        if let Some(m) = median(c1.iter().filter_map(|t| t.gain_sgd_reversed).collect()) {
            r.metric("median_gain_sgd_reversed", m);
        }
        let diverged = trials.iter().filter(|t| t.diverged).count();
        if diverged > 0 {
            r.notes = format!("{diverged} trials diverged and count as not improved");
        }
        r
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Runs `trials` independent trials of one scenario.
pub fn run_trials(
    scenario: &Scenario,
    opts: &TrialOptions,
    trials: usize,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<TrialResult>> {
    scenario.validate()?;
    run_indexed(trials, workers, |i| run_trial(scenario, opts, i as u64, derive_seed(master_seed, i as u64)))
}

/// Cross-product grid. Empty `batch` means `B = d` in every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub d: Vec<usize>,
    pub alpha0: Vec<f64>,
    pub alpha_c: Vec<f64>,
    pub alpha_r: Vec<f64>,
    pub delta: Vec<f64>,
    pub batch: Vec<u64>,
    pub trials: Vec<usize>,
    pub theta0_norm: f64,
}

impl SweepGrid {
    fn cells(&self) -> Vec<(Scenario, usize)> {
        let batches: Vec<Option<u64>> =
            if self.batch.is_empty() { vec![None] } else { self.batch.iter().copied().map(Some).collect() };
        let mut out = Vec::new();
        for &dim in &self.d {
            for &alpha0 in &self.alpha0 {
                for &alpha_c in &self.alpha_c {
                    for &alpha_r in &self.alpha_r {
                        for &delta in &self.delta {
                            for &batch in &batches {
                                for &trials in &self.trials {
                                    let s = Scenario {
                                        dim,
                                        alpha0,
                                        alpha_c,
                                        alpha_r,
                                        theta0_norm: self.theta0_norm,
                                        delta,
                                        batch,
                                    };
                                    out.push((s, trials));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutput {
    pub reports: Vec<ExperimentReport>,
    #[serde(skip)]
    pub rows: Vec<TrialResult>,
}

/// Runs every grid cell. Trial `t` of cell `c` uses seed
/// `derive_seed(derive_seed(master_seed, c), t)`; invalid cells yield a
/// report with a note and no trials.
pub fn sweep(grid: &SweepGrid, opts: &TrialOptions, master_seed: u64, workers: usize) -> Result<SweepOutput> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(invalid("sweep grid is empty"));
    }
    let mut jobs = Vec::new();
    for (c, (scenario, trials)) in cells.iter().enumerate() {
        if scenario.validate().is_ok() {
            jobs.extend((0..*trials).map(|t| (c, t)));
        }
    }
    let results = run_indexed(jobs.len(), workers, |j| {
        let (c, t) = jobs[j];
        let seed = derive_seed(derive_seed(master_seed, c as u64), t as u64);
        run_trial(&cells[c].0, opts, j as u64, seed)
    })?;

    let mut reports = Vec::with_capacity(cells.len());
    let mut offset = 0;
    for (c, (scenario, trials)) in cells.iter().enumerate() {
        let mut config = scenario.echo();
        config["cell"] = json!(c);
        config["trials"] = json!(trials);
        config["seed"] = json!(master_seed);
        config["options"] = opts.echo();
        let report = match scenario.validate() {
            Ok(()) => {
                let slice = &results[offset..offset + trials];
                offset += trials;
                ExperimentReport::from_trials("sweep_cell", config, slice)
            }
            Err(e) => {
                let mut r = ExperimentReport::new("sweep_cell", config);
                r.notes = format!("cell skipped: {e}");
                r
            }
        };
        reports.push(report);
    }
    Ok(SweepOutput { reports, rows: results })
}

// Verification runs.

/// Monte Carlo mean of the preference gradient against `-v_Δ/√(2π)` for
/// teachers `e1`, `e2`. Samples are split into fixed chunks, each with its
/// own stream, so the sum is independent of `workers`.
pub fn verify_gradient(dim: usize, n_samples: u64, seed: u64, workers: usize) -> Result<ExperimentReport> {
    if dim < 2 {
        return Err(invalid("gradient check needs dim >= 2"));
    }
    if n_samples == 0 {
        return Err(invalid("n_samples must be >= 1"));
    }
    let e1 = DenseVector::basis(dim, 0);
    let e2 = DenseVector::basis(dim, 1);
    let task = Task::new(e1.clone())?;
    let teachers = TeacherPair::new(e1, e2, &task)?;
    let target = population_direction(&teachers)?.scaled(-1.0 / SQRT_TWO_PI);

    let mut report = ExperimentReport::new(
        "gradient",
        json!({"d": dim, "n_samples": n_samples, "seed": seed, "theta_c": "e1", "theta_r": "e2"}),
    );
    report.fraction_basis = "none".to_string();

    // Nested sample sizes N/100, N/10, N for the rate metric.
    let sizes: Vec<u64> = [n_samples / 100, n_samples / 10, n_samples].into_iter().filter(|&n| n > 0).collect();
    let mut final_err = f64::NAN;
    for (k, &n) in sizes.iter().enumerate() {
        let (m, sd) = gradient_moments(&teachers, n, derive_seed(seed, k as u64), workers)?;
        let err = (&m - &target).norm();
        report.metric(&format!("error_n{n}"), err);
        report.metric(&format!("scaled_error_n{n}"), err * (n as f64).sqrt());
        if n == n_samples {
            final_err = err;
            let z: Vec<f64> = (0..dim)
                .map(|i| {
                    let se = sd[i] / (n as f64).sqrt();
                    if se > 0.0 {
                        (m.as_slice()[i] - target.as_slice()[i]) / se
                    } else {
                        0.0
                    }
                })
                .collect();
            let max_z = z.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            report.metric("max_abs_z", max_z);
            report.config["z_scores"] = json!(z);
        }
    }
    report.metric("error", final_err);
    report.check(Check::new("error_norm", final_err, Comparison::AtMost, 0.01));
    report.n_trials = n_samples;
    Ok(report)
}

const GRADIENT_CHUNKS: u64 = 64;

/// Mean and per-coordinate standard deviation of `∇L_pref` over `n` draws.
fn gradient_moments(teachers: &TeacherPair, n: u64, seed: u64, workers: usize) -> Result<(DenseVector, Vec<f64>)> {
    let dim = teachers.dim();
    let zero = DenseVector::zeros(dim);
    let chunks = GRADIENT_CHUNKS.min(n);
    let parts = run_indexed(chunks as usize, workers, |c| {
        let c = c as u64;
        let len = n / chunks + u64::from(c < n % chunks);
        let mut rng = RngStream::new(seed, c);
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for _ in 0..len {
            let ex = make_pair(teachers, sample_gaussian(dim, &mut rng)?)?;
            let g = trainer::pref_grad(&zero, &ex)?;
            for (i, &gi) in g.as_slice().iter().enumerate() {
                sum[i] += gi;
                sq[i] += gi * gi;
            }
        }
        Ok((sum, sq))
    })?;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for (s, q) in parts {
        for i in 0..dim {
            sum[i] += s[i];
            sq[i] += q[i];
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let sd = sq.iter().zip(&mean).map(|(q, m)| (q / nf - m * m).max(0.0).sqrt()).collect();
    Ok((DenseVector::new(mean)?, sd))
}

/// Monte Carlo 0-1 loss of random students against `arccos(cos)/π`.
pub fn verify_loss(
    dim: usize,
    n_thetas: usize,
    n_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<ExperimentReport> {
    if n_samples == 0 || n_thetas == 0 {
        return Err(invalid("n_thetas and n_samples must be >= 1"));
    }
    let errs = run_indexed(n_thetas, workers, |i| {
        let root = RngStream::new(derive_seed(seed, i as u64), 0);
        let task = Task::sample(dim, &mut root.fork(0))?;
        let theta = sample_gaussian(dim, &mut root.fork(1))?;
        let mc = zo_loss_mc(&theta, &task, n_samples, &mut root.fork(2))?;
        Ok((mc - zo_loss_exact(&theta, &task)?).abs())
    })?;
    let max_err = errs.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut report =
        ExperimentReport::new("loss", json!({"d": dim, "n_thetas": n_thetas, "n_samples": n_samples, "seed": seed}));
    report.n_trials = n_thetas as u64;
    let within = errs.iter().filter(|&&e| e <= 0.012).count() as u64;
    report.set_fraction(within, n_thetas as u64, "within_tolerance/thetas");
    report.metric("max_abs_error", max_err);
    report.check(Check::new("max_abs_error", max_err, Comparison::AtMost, 0.012));
    Ok(report)
}

/// Worst-case discrepancies of one random ray configuration.
#[derive(Debug, Clone, Copy, Default)]
struct RayErrors {
    identity_gap: f64,
    kappa_gap: f64,
    fd_rel: f64,
    curvature_excess: f64,
}

fn ray_config(seed: u64) -> Result<RayErrors> {
    let mut rng = RngStream::new(seed, 0);
    let dim = 2 + (rng.uniform() * 63.0) as usize;
    let task = Task::sample(dim, &mut rng)?;
    let theta0 = sample_unit_sphere(dim, &mut rng)?.scaled(0.25 + 3.75 * rng.uniform());
    let (mut a, mut b) = (2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0);
    if a < b {
        std::mem::swap(&mut a, &mut b);
    }
    if a - b < 1e-3 {
        a = (b + 1e-3).min(1.0);
        b = a - 1e-3;
    }
    let teachers = sample_teacher_pair(&task, a, b, &mut rng)?;
    let v = population_direction(&teachers)?;
    let n0 = theta0.norm();
    let nv = v.norm();
    let ids = theory::f_prime_zero_identities(&theta0, &v, &task)?;
    let k = theory::kappa(&theta0, &teachers, &task)?;
    let f = |l: f64| theory::f_along_ray(&theta0, &v, &task, l);
    let scale = (nv / n0).max(ids.projected.abs());

    let h = 1e-4 * n0 / nv;
    let fd = (f(h)? - f(-h)?) / (2.0 * h);
    let mut out = RayErrors {
        identity_gap: (ids.projected - ids.decomposed).abs(),
        kappa_gap: (ids.projected - k / n0).abs().max((ids.decomposed - k / n0).abs()),
        fd_rel: (fd - ids.projected).abs() / scale,
        curvature_excess: f64::NEG_INFINITY,
    };

    let lambda_max = 0.5 * n0 / nv;
    let bound = theory::f_second_bound(&theta0, &v, lambda_max)?;
    let hs = 1e-3 * n0 / nv;
    const GRID: usize = 16;
    for j in 0..=GRID {
        let l = hs + (lambda_max - 2.0 * hs) * j as f64 / GRID as f64;
        let second = (f(l + hs)? - 2.0 * f(l)? + f(l - hs)?) / (hs * hs);
        out.curvature_excess = out.curvature_excess.max(second.abs() - bound);
    }
    Ok(out)
}

/// First- and second-order checks of the alignment along `θ0 + λ v_Δ`.
pub fn verify_ray(configs: usize, seed: u64, workers: usize) -> Result<ExperimentReport> {
    if configs == 0 {
        return Err(invalid("configs must be >= 1"));
    }
    let errs = run_indexed(configs, workers, |i| ray_config(derive_seed(seed, i as u64)))?;
    let worst =
        errs.iter().fold(RayErrors { curvature_excess: f64::NEG_INFINITY, ..RayErrors::default() }, |w, e| RayErrors {
            identity_gap: w.identity_gap.max(e.identity_gap),
            kappa_gap: w.kappa_gap.max(e.kappa_gap),
            fd_rel: w.fd_rel.max(e.fd_rel),
            curvature_excess: w.curvature_excess.max(e.curvature_excess),
        });
    let mut report = ExperimentReport::new("ray", json!({"configs": configs, "seed": seed}));
    report.n_trials = configs as u64;
    report.fraction_basis = "none".to_string();
    report.metric("max_identity_gap", worst.identity_gap);
    report.metric("max_kappa_gap", worst.kappa_gap);
    report.metric("max_fd_relative_error", worst.fd_rel);
    report.metric("max_curvature_excess", worst.curvature_excess);
    report.check(Check::new("identity_gap", worst.identity_gap, Comparison::AtMost, 1e-10));
    report.check(Check::new("kappa_gap", worst.kappa_gap, Comparison::AtMost, 1e-10));
    report.check(Check::new("fd_relative_error", worst.fd_rel, Comparison::AtMost, 1e-5));
    report.check(Check::new("curvature_excess", worst.curvature_excess, Comparison::AtMost, 1e-4));
    Ok(report)
}

/// Population runs to `H*` on random C1 instances; each must gain at least `Γ`.
pub fn verify_population(dim: usize, instances: usize, seed: u64, workers: usize) -> Result<ExperimentReport> {
    const STEPS: u64 = 1000;
    const MAX_DRAWS: u64 = 10_000;
    if instances == 0 {
        return Err(invalid("instances must be >= 1"));
    }
    let out = run_indexed(instances, workers, |i| {
        let mut rng = RngStream::new(derive_seed(seed, i as u64), 0);
        for _ in 0..MAX_DRAWS {
            let task = Task::sample(dim, &mut rng)?;
            let theta0 = sample_unit_sphere(dim, &mut rng)?.scaled(0.5 + 1.5 * rng.uniform());
            let mut acc = [rng.uniform(), rng.uniform()];
            acc.sort_by(f64::total_cmp);
            let (alpha_c, alpha_r) = (accuracy_to_alpha(acc[1])?, accuracy_to_alpha(acc[0])?);
            if alpha_c <= alpha_r {
                continue;
            }
            let teachers = sample_teacher_pair(&task, alpha_c, alpha_r, &mut rng)?;
            let k = theory::kappa(&theta0, &teachers, &task)?;
            if k <= 0.0 {
                continue;
            }
            let vv = population_direction(&teachers)?.norm_sq();
            let (gamma, horizon) = theory::gamma_and_horizon(k, theta0.norm(), vv)?;
            let cfg = TrainConfig {
                mode: TrainMode::Population,
                eta: horizon / STEPS as f64,
                steps: STEPS,
                batch: 1,
                record_every: STEPS,
                seed: 0,
                sampler: Sampler::Dense,
            };
            let trace = train(&theta0, &teachers, &task, &cfg, &mut rng)?;
            return Ok((trace.gain, gamma));
        }
        Err(invalid("no C1 instance found"))
    })?;
    let n_ok = out.iter().filter(|(g, gamma)| g >= gamma).count() as u64;
    let min_ratio = out.iter().map(|(g, gamma)| g / gamma).fold(f64::INFINITY, f64::min);
    let mut report = ExperimentReport::new("population", json!({"d": dim, "instances": instances, "seed": seed}));
    report.n_trials = instances as u64;
    report.n_c1 = instances as u64;
    report.n_improved = n_ok;
    report.set_fraction(n_ok, instances as u64, "gain_at_least_gamma/instances");
    report.metric("min_gain_over_gamma", min_ratio);
    report.check(Check::new("fraction_gain_at_least_gamma", report.fraction, Comparison::AtLeast, 1.0));
    Ok(report)
}

/// Parameters of [`verify_deviation`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSetup {
    pub scenario: Scenario,
    pub eta: f64,
    pub steps: u64,
    pub trials: usize,
    pub sampler: Sampler,
}

/// Paired empirical and population runs with fixed `η`, `T` compared against
/// the deviation bound.
pub fn verify_deviation(setup: &DeviationSetup, seed: u64, workers: usize) -> Result<ExperimentReport> {
    let s = &setup.scenario;
    s.validate()?;
    let batch = s.batch();
    let bound = theory::deviation_bound(setup.eta, s.dim as u64, setup.steps, batch, s.delta)?;
    let base = TrainConfig {
        mode: TrainMode::Population,
        eta: setup.eta,
        steps: setup.steps,
        batch,
        record_every: setup.steps,
        seed,
        sampler: setup.sampler,
    };
    base.validate()?;
    let dists = run_indexed(setup.trials, workers, |i| {
        let trial_seed = derive_seed(seed, i as u64);
        let (task, theta0, teachers) = sample_instance(s, trial_seed)?;
        let mut rng = RngStream::new(trial_seed, 0).fork(STREAM_SGD);
        let pop = train(&theta0, &teachers, &task, &base, &mut rng)?;
        let sgd_cfg = TrainConfig { mode: TrainMode::Empirical, ..base.clone() };
        let sgd = train(&theta0, &teachers, &task, &sgd_cfg, &mut rng)?;
        trainer::deviation(&sgd, &pop)
    })?;
    let within = dists.iter().filter(|&&d| d <= bound).count() as u64;
    let mut report = ExperimentReport::new(
        "deviation",
        json!({
            "scenario": s.echo(),
            "eta": setup.eta,
            "steps": setup.steps,
            "trials": setup.trials,
            "sampler": setup.sampler,
            "seed": seed,
        }),
    );
    report.n_trials = setup.trials as u64;
    report.set_fraction(within, setup.trials as u64, "within_bound/trials");
    report.metric("bound", bound);
    report.metric("max_distance", dists.iter().fold(0.0, |a: f64, &b| a.max(b)));
    if let Some(m) = median(dists.clone()) {
        report.metric("median_distance", m);
    }
    report.check(Check::new("fraction_within_bound", report.fraction, Comparison::AtLeast, 1.0 - s.delta));
    Ok(report)
}

/// Fraction of sampled teacher pairs satisfying C1, next to the dimension
/// threshold for the same scenario. The fraction is asserted only when
/// `d >= d*`.
pub fn verify_remark2(
    scenario: &Scenario,
    expected_d_star: Option<f64>,
    trials: usize,
    seed: u64,
    workers: usize,
) -> Result<ExperimentReport> {
    let rows = run_trials(scenario, &TrialOptions::certificate_only(), trials, seed, workers)?;
    let n_c1 = rows.iter().filter(|r| r.c1_holds).count() as u64;
    let mut config = scenario.echo();
    config["trials"] = json!(trials);
    config["seed"] = json!(seed);
    let mut report = ExperimentReport::new("remark2", config);
    report.n_trials = trials as u64;
    report.n_c1 = n_c1;
    report.set_fraction(n_c1, trials as u64, "c1/trials");
    let d_star =
        theory::d_star(scenario.alpha0, scenario.alpha_c, scenario.alpha_r, scenario.theta0_norm, scenario.delta)?;
    report.metric("d_star", d_star);
    if let Some(expected) = expected_d_star {
        report.check(Check::new("d_star_error", (d_star - expected).abs(), Comparison::AtMost, 0.5));
    }
    if scenario.dim as f64 >= d_star {
        report.check(Check::new("fraction_c1", report.fraction, Comparison::AtLeast, 1.0 - scenario.delta));
    } else {
        report.notes = format!("d = {} is below d* = {d_star:.4}; fraction reported without assertion", scenario.dim);
    }
    Ok(report)
}

/// Expected threshold for the 80/70/60 scenario at `δ = 0.1`.
pub const REMARK2_D_STAR: f64 = 1613.7;

/// End-to-end SGD with prescribed `η`, `T`, plus the reversed-teacher control.
pub fn verify_theorem1(
    scenario: &Scenario,
    trials: usize,
    sampler: Sampler,
    seed: u64,
    workers: usize,
) -> Result<(ExperimentReport, Vec<TrialResult>)> {
    let opts = TrialOptions { population: true, sgd: true, reversed: true, sampler, eta: None, steps: None };
    let rows = run_trials(scenario, &opts, trials, seed, workers)?;
    let mut config = scenario.echo();
    config["trials"] = json!(trials);
    config["seed"] = json!(seed);
    config["options"] = opts.echo();
    let mut report = ExperimentReport::from_trials("theorem1", config, &rows);
    report.check(Check::new("fraction_improved", report.fraction, Comparison::AtLeast, 0.9));
    let mean_gain = report.metrics.get("mean_gain_sgd").copied().unwrap_or(f64::NAN);
    report.check(Check::new("mean_gain_sgd", mean_gain, Comparison::Above, 0.0));
    let med_rev = report.metrics.get("median_gain_sgd_reversed").copied().unwrap_or(f64::NAN);
    report.check(Check::new("median_gain_sgd_reversed", med_rev, Comparison::Below, 0.0));
    Ok((report, rows))
}
