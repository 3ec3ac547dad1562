//! The naive preference loss and the two training dynamics.
//!
//! Empirical steps use the batch *mean* of `∇L_pref` scaled by `√(2π)`, so
//! that the expected empirical step equals the population step `η·v_Δ`
//! exactly and the two kinds of traces are directly comparable.
//!
//! Two empirical samplers are available:
//!
//! * [`Sampler::Dense`] draws every covariate of every batch.
//! * [`Sampler::Aggregated`] exploits that `∇L_pref = -(y_c - y_r) x` does not
//!   depend on the student: between two recorded steps only the sum of the
//!   per-example gradients matters. Labels depend on `x` only through its
//!   projection on the teachers' plane, so the sum splits into a binomial
//!   count `K` of disagreeing examples, a Gaussian `N(0, K·I)` component in
//!   the plane's orthogonal complement (exact), and the sum of `K` draws from
//!   the Gaussian restricted to the disagreement wedge. The wedge sum is
//!   drawn exactly for `K <= EXACT_WEDGE_LIMIT` and from the moment-matched
//!   bivariate normal above it.

use std::f64::consts::{FRAC_PI_2, PI};

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SimError};
use crate::geometry::{check_dims, sample_gaussian, DenseVector, RngStream};
use crate::task::{sign_label, PreferenceExample, Task, TeacherPair};

/// `√(2π)`: rescales the batch-mean gradient onto `v_Δ`.
pub const SQRT_TWO_PI: f64 = 2.506_628_274_631_000_2;

/// Largest disagreement count whose in-plane sum is drawn sample by sample.
pub const EXACT_WEDGE_LIMIT: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Empirical,
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    #[default]
    Dense,
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub eta: f64,
    pub steps: u64,
    /// Ignored in population mode.
    pub batch: u64,
    pub record_every: u64,
    pub seed: u64,
    #[serde(default)]
    pub sampler: Sampler,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(invalid(format!("learning rate {} must be finite and non-negative", self.eta)));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be >= 1"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every must be >= 1"));
        }
        if !(self.eta * self.steps as f64).is_finite() {
            return Err(invalid("eta * steps overflows"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub cosine: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub mode: TrainMode,
    pub eta: f64,
    pub steps: u64,
    pub points: Vec<TracePoint>,
    pub initial_theta: DenseVector,
    pub final_theta: DenseVector,
    /// Final cosine minus initial cosine.
    pub gain: f64,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `log p_θ(y | x)` under the logistic model, for logit `z = <θ, x>`.
#[inline]
fn log_prob(z: f64, y: bool) -> f64 {
    if y {
        -softplus(-z)
    } else {
        -softplus(z)
    }
}

/// `-(log p_θ(y_c|x) - log p_θ(y_r|x))`.
pub fn pref_loss(theta: &DenseVector, ex: &PreferenceExample) -> Result<f64> {
    check_dims(theta, &ex.x)?;
    let z = theta.dot(&ex.x);
    Ok(-(log_prob(z, ex.y_c) - log_prob(z, ex.y_r)))
}

/// `-(y_c - y_r) x`; the student parameters cancel out.
pub fn pref_grad(theta: &DenseVector, ex: &PreferenceExample) -> Result<DenseVector> {
    check_dims(theta, &ex.x)?;
    let s = ex.y_c as i8 - ex.y_r as i8;
    Ok(ex.x.scaled(-(s as f64)))
}

/// `θc/|θc| - θr/|θr|`.
pub fn population_direction_of(theta_c: &DenseVector, theta_r: &DenseVector) -> Result<DenseVector> {
    check_dims(theta_c, theta_r)?;
    if theta_c.is_zero() || theta_r.is_zero() {
        return Err(SimError::DegenerateDirection("teacher parameters must be nonzero"));
    }
    Ok(&theta_c.normalized()? - &theta_r.normalized()?)
}

/// The delta direction `v_Δ`. The population gradient is `-v_Δ / √(2π)`.
pub fn population_direction(teachers: &TeacherPair) -> Result<DenseVector> {
    population_direction_of(teachers.theta_c(), teachers.theta_r())
}

fn record_schedule(steps: u64, every: u64) -> impl Iterator<Item = u64> {
    let regular = (1..).map(move |k| k * every).take_while(move |&s| s < steps);
    std::iter::once(0).chain(regular).chain(std::iter::once(steps))
}

struct Recorder<'a> {
    task: &'a Task,
    points: Vec<TracePoint>,
}

impl Recorder<'_> {
    fn push(&mut self, step: u64, theta: &DenseVector) -> Result<()> {
        self.points.push(TracePoint { step, cosine: self.task.alignment(theta)?, norm: theta.norm() });
        Ok(())
    }
}

/// Trains `theta0` on preference pairs from `teachers`.
///
/// Population mode evaluates the closed form `θ0 + (η t) v_Δ` at each recorded
/// step. Empirical mode draws fresh batches every step (see the module docs
/// for the two samplers).
pub fn train(
    theta0: &DenseVector,
    teachers: &TeacherPair,
    task: &Task,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainTrace> {
    cfg.validate()?;
    check_dims(task.theta_star(), theta0)?;
    check_dims(task.theta_star(), teachers.theta_c())?;
    if theta0.is_zero() {
        return Err(SimError::DegenerateDirection("initial student must be nonzero"));
    }
    let mut rec = Recorder { task, points: Vec::new() };
    let mut theta = theta0.clone();
    let mut last_good = theta0.clone();
    let mut prev = 0u64;
    let step_scale = cfg.eta * SQRT_TWO_PI / cfg.batch as f64;

    let v_delta = population_direction(teachers)?;
    let plane = match (cfg.mode, cfg.sampler) {
        (TrainMode::Empirical, Sampler::Aggregated) => Some(WedgeModel::new(teachers)?),
        _ => None,
    };
    let mut grad_sum = DenseVector::zeros(theta0.dim());

    for step in record_schedule(cfg.steps, cfg.record_every) {
        match cfg.mode {
            TrainMode::Population => {
                theta = theta0.clone();
                theta.axpy(cfg.eta * step as f64, &v_delta);
                if !theta.is_finite() {
                    return Err(diverged(step, cfg, &rec, theta0, &last_good));
                }
            }
            TrainMode::Empirical => {
                if let Some(plane) = &plane {
                    if step > prev {
                        let n = (step - prev) * cfg.batch;
                        let s = plane.sample_sum(n, rng)?;
                        theta.axpy(step_scale, &s);
                        if !theta.is_finite() {
                            return Err(diverged(step, cfg, &rec, theta0, &last_good));
                        }
                    }
                } else {
                    for t in prev..step {
                        dense_batch_sum(teachers, cfg.batch, rng, &mut grad_sum)?;
                        theta.axpy(step_scale, &grad_sum);
                        if !theta.is_finite() {
                            return Err(diverged(t + 1, cfg, &rec, theta0, &last_good));
                        }
                    }
                }
            }
        }
        rec.push(step, &theta)?;
        last_good.clone_from(&theta);
        prev = step;
    }
    Ok(finish(cfg, rec.points, theta0, theta))
}

fn finish(cfg: &TrainConfig, points: Vec<TracePoint>, theta0: &DenseVector, theta: DenseVector) -> TrainTrace {
    let gain = match (points.first(), points.last()) {
        (Some(a), Some(b)) => b.cosine - a.cosine,
        _ => 0.0,
    };
    TrainTrace {
        mode: cfg.mode,
        eta: cfg.eta,
        steps: cfg.steps,
        points,
        initial_theta: theta0.clone(),
        final_theta: theta,
        gain,
    }
}

fn diverged(
    step: u64,
    cfg: &TrainConfig,
    rec: &Recorder<'_>,
    theta0: &DenseVector,
    last_good: &DenseVector,
) -> SimError {
    let mut trace = finish(cfg, rec.points.clone(), theta0, last_good.clone());
    trace.steps = rec.points.last().map(|p| p.step).unwrap_or(0);
    SimError::Divergence { step, trace: Box::new(trace) }
}

/// Overwrites `out` with `Σ_i (y_c - y_r) x_i` over one fresh batch, i.e. the
/// negated sum of per-example gradients.
fn dense_batch_sum(teachers: &TeacherPair, batch: u64, rng: &mut RngStream, out: &mut DenseVector) -> Result<()> {
    *out = DenseVector::zeros(out.dim());
    for _ in 0..batch {
        let x = sample_gaussian(out.dim(), rng)?;
        match (sign_label(teachers.theta_c(), &x), sign_label(teachers.theta_r(), &x)) {
            (true, false) => out.axpy(1.0, &x),
            (false, true) => out.axpy(-1.0, &x),
            _ => {}
        }
    }
    Ok(())
}

/// Distance between the final iterates of an empirical and a population run
/// started from the same `θ0` with the same `η` and `T`.
pub fn deviation(trace_sgd: &TrainTrace, trace_pop: &TrainTrace) -> Result<f64> {
    if trace_sgd.initial_theta != trace_pop.initial_theta {
        return Err(SimError::TraceMismatch("initial iterates differ"));
    }
    if trace_sgd.eta != trace_pop.eta {
        return Err(SimError::TraceMismatch("learning rates differ"));
    }
    if trace_sgd.steps != trace_pop.steps {
        return Err(SimError::TraceMismatch("step counts differ"));
    }
    Ok(trace_sgd.final_theta.distance(&trace_pop.final_theta))
}

/// Law of `(y_c - y_r) x` for `x ~ N(0, I_d)`, decomposed along the teachers'
/// plane.
///
/// In the orthonormal frame `u1 = θc`, `u2 ∝ θr - <θr, θc> θc`, the teachers
/// sit at angles 0 and `ψ`. The chosen-minus-rejected sign is nonzero with
/// probability `ψ/π`, and `(y_c - y_r) x` then lies in the wedge
/// `φ ∈ [-π/2, ψ - π/2)` with a uniform angle and a Rayleigh radius.
#[derive(Debug, Clone)]
pub struct WedgeModel {
    u1: DenseVector,
    u2: Option<DenseVector>,
    psi: f64,
    /// Conditional mean and covariance of one wedge draw in `(u1, u2)` coordinates.
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

impl WedgeModel {
    pub fn new(teachers: &TeacherPair) -> Result<Self> {
        let u1 = teachers.theta_c().normalized()?;
        let r = teachers.theta_r().normalized()?;
        let c = u1.dot(&r).clamp(-1.0, 1.0);
        let mut perp = r.clone();
        perp.axpy(-c, &u1);
        let pn = perp.norm();
        if pn > 1e-12 {
            let psi = pn.atan2(c);
            let u2 = perp.scaled(1.0 / pn);
            let (mean, cov) = wedge_moments(psi);
            Ok(Self { u1, u2: Some(u2), psi, mean, cov })
        } else if c > 0.0 {
            Ok(Self { u1, u2: None, psi: 0.0, mean: [0.0; 2], cov: [[0.0; 2]; 2] })
        } else {
            // Opposite teachers: every pair disagrees and (y_c - y_r) x = |<θc, x>| θc + (complement).
            let m = (2.0 / PI).sqrt();
            Ok(Self { u1, u2: None, psi: PI, mean: [m, 0.0], cov: [[1.0 - m * m, 0.0], [0.0, 0.0]] })
        }
    }

    /// Angle between the teachers.
    pub fn angle(&self) -> f64 {
        self.psi
    }

    pub fn disagreement_probability(&self) -> f64 {
        (self.psi / PI).clamp(0.0, 1.0)
    }

    /// Mean of `(y_c - y_r) x`, which equals `v_Δ / √(2π)`.
    pub fn mean(&self) -> DenseVector {
        let p = self.disagreement_probability();
        self.embed(p * self.mean[0], p * self.mean[1])
    }

    fn embed(&self, a: f64, b: f64) -> DenseVector {
        let mut out = self.u1.scaled(a);
        if let Some(u2) = &self.u2 {
            out.axpy(b, u2);
        }
        out
    }

    fn wedge_draw(&self, rng: &mut RngStream) -> (f64, f64) {
        let radius = (-2.0 * (1.0 - rng.uniform()).ln()).sqrt();
        if self.u2.is_some() {
            let phi = -FRAC_PI_2 + self.psi * rng.uniform();
            (radius * phi.cos(), radius * phi.sin())
        } else {
            // Half-normal along u1.
            (rng.standard_normal().abs(), 0.0)
        }
    }

    /// `Σ_{i<n} (y_c,i - y_r,i) x_i` for `n` fresh covariates.
    pub fn sample_sum(&self, n: u64, rng: &mut RngStream) -> Result<DenseVector> {
        let dim = self.u1.dim();
        let p = self.disagreement_probability();
        let k = if p <= 0.0 {
            0
        } else if p >= 1.0 {
            n
        } else {
            Binomial::new(n, p).map_err(|e| invalid(e.to_string()))?.sample(rng)
        };
        if k == 0 {
            return Ok(DenseVector::zeros(dim));
        }
        let (a, b) = if k <= EXACT_WEDGE_LIMIT {
            let (mut a, mut b) = (0.0, 0.0);
            for _ in 0..k {
                let (x, y) = self.wedge_draw(rng);
                a += x;
                b += y;
            }
            (a, b)
        } else {
            let kf = k as f64;
            let (z1, z2) = (rng.standard_normal(), rng.standard_normal());
            // Cholesky factor of the 2x2 conditional covariance.
            let l11 = self.cov[0][0].max(0.0).sqrt();
            let l21 = if l11 > 0.0 { self.cov[1][0] / l11 } else { 0.0 };
            let l22 = (self.cov[1][1] - l21 * l21).max(0.0).sqrt();
            let s = kf.sqrt();
            (kf * self.mean[0] + s * l11 * z1, kf * self.mean[1] + s * (l21 * z1 + l22 * z2))
        };
        let mut out = self.embed(a, b);
        let mut noise = sample_gaussian(dim, rng)?;
        noise.axpy(-noise.dot(&self.u1), &self.u1);
        if let Some(u2) = &self.u2 {
            noise.axpy(-noise.dot(u2), u2);
        }
        out.axpy((k as f64).sqrt(), &noise);
        Ok(out)
    }
}

/// Mean and covariance of `r (cos φ, sin φ)` with `r` Rayleigh and `φ`
/// uniform on `[-π/2, ψ - π/2)`.
fn wedge_moments(psi: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let (lo, hi) = (-FRAC_PI_2, psi - FRAC_PI_2);
    let mean_r = (PI / 2.0).sqrt();
    let mean = [mean_r * (hi.sin() - lo.sin()) / psi, mean_r * (lo.cos() - hi.cos()) / psi];
    let s2 = ((2.0 * hi).sin() - (2.0 * lo).sin()) / 4.0;
    let m11 = 2.0 * (psi / 2.0 + s2) / psi;
    let m22 = 2.0 * (psi / 2.0 - s2) / psi;
    let m12 = 2.0 * ((hi.sin().powi(2) - lo.sin().powi(2)) / 2.0) / psi;
    let cov = [[m11 - mean[0] * mean[0], m12 - mean[0] * mean[1]], [m12 - mean[0] * mean[1], m22 - mean[1] * mean[1]]];
    (mean, cov)
}
