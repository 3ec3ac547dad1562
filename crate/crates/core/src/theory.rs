//! Closed-form certificates for delta learning.
//!
//! Along the population ray `ℓ(λ) = θ0 + λ v_Δ` the student's alignment is
//! `f(λ) = cos(ℓ(λ), θ*)`. Its slope at the origin is `κ / |θ0|`, its
//! curvature is bounded by `(2/√3) |v_Δ|² / |ℓ(λ)|²`, and a second-order
//! Taylor bound over the horizon `H* = κ|θ0| / (4|v_Δ|²)` certifies the gain
//! `Γ = GAIN_CONSTANT · κ² / |v_Δ|²`.
//!
//! Every routine uses the κ² form of `Γ` produced by the Taylor bound. The
//! linear variant `κ/50` is exposed as [`STATED_LINEAR_GAIN_RATIO`] for
//! comparison only.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{invalid, Result, SimError};
use crate::geometry::{check_dims, cosine, project_orthogonal, DenseVector};
use crate::task::{Task, TeacherPair};
use crate::trainer::{population_direction, SQRT_TWO_PI};

/// `(√3/8)(2/√3 - 2/3)`.
pub const GAIN_CONSTANT: f64 = 0.105_662_432_702_593_56;

/// The linear `Γ = κ/50` variant; not used operationally.
pub const STATED_LINEAR_GAIN_RATIO: f64 = 1.0 / 50.0;

/// `2/√3`, the supremum of `sqrt(1 + 2c² - 3c⁴)` over `c ∈ [-1, 1]`.
pub const CURVATURE_CONSTANT: f64 = 1.154_700_538_379_251_5;

const IDENTITY_TOL: f64 = 1e-10;
const MIN_RAY_NORM: f64 = 1e-30;

/// Condition C1: `(αc - αr)(1 - α0²) - α0 <P θ̃0, P v_Δ>` with `P` the
/// projector onto the complement of `θ*`.
pub fn kappa(theta0: &DenseVector, teachers: &TeacherPair, task: &Task) -> Result<f64> {
    check_dims(task.theta_star(), theta0)?;
    if theta0.is_zero() {
        return Err(SimError::DegenerateDirection("initial student must be nonzero"));
    }
    let star = task.theta_star();
    let alpha0 = cosine(theta0, star)?;
    let alpha_c = cosine(teachers.theta_c(), star)?;
    let alpha_r = cosine(teachers.theta_r(), star)?;
    let v_delta = population_direction(teachers)?;
    let student_off_axis = project_orthogonal(&theta0.normalized()?, star)?;
    let delta_off_axis = project_orthogonal(&v_delta, star)?;
    Ok((alpha_c - alpha_r) * (1.0 - alpha0 * alpha0) - alpha0 * student_off_axis.dot(&delta_off_axis))
}

fn ray_point(theta0: &DenseVector, v_delta: &DenseVector, lambda: f64) -> DenseVector {
    let mut p = theta0.clone();
    p.axpy(lambda, v_delta);
    p
}

/// `f(λ) = cos(θ0 + λ v_Δ, θ*)`.
pub fn f_along_ray(theta0: &DenseVector, v_delta: &DenseVector, task: &Task, lambda: f64) -> Result<f64> {
    check_dims(theta0, v_delta)?;
    let p = ray_point(theta0, v_delta, lambda);
    if p.norm() <= MIN_RAY_NORM {
        return Err(SimError::DegenerateDirection("ray passes through the origin"));
    }
    task.alignment(&p)
}

/// Both closed forms of `f'(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeIdentities {
    /// `<proj_{θ0⊥}(v_Δ), θ*> / |θ0|`.
    pub projected: f64,
    /// The same quantity after splitting `θ0` and `v_Δ` along `θ*`.
    pub decomposed: f64,
}

pub fn f_prime_zero_identities(theta0: &DenseVector, v_delta: &DenseVector, task: &Task) -> Result<SlopeIdentities> {
    check_dims(task.theta_star(), theta0)?;
    check_dims(theta0, v_delta)?;
    let star = task.theta_star();
    let n0 = theta0.norm();
    if n0 == 0.0 {
        return Err(SimError::DegenerateDirection("initial student must be nonzero"));
    }
    let projected = project_orthogonal(v_delta, theta0)?.dot(star) / n0;

    let a_star = theta0.dot(star);
    let b_star = v_delta.dot(star);
    let n0_sq = n0 * n0;
    let cross = project_orthogonal(theta0, star)?.dot(&project_orthogonal(v_delta, star)?);
    let decomposed = (b_star * (1.0 - a_star * a_star / n0_sq) - a_star / n0_sq * cross) / n0;
    Ok(SlopeIdentities { projected, decomposed })
}

/// `f'(0)`. Errors if the two closed forms disagree beyond rounding.
pub fn f_prime_zero(theta0: &DenseVector, v_delta: &DenseVector, task: &Task) -> Result<f64> {
    let ids = f_prime_zero_identities(theta0, v_delta, task)?;
    let scale = (v_delta.norm() / theta0.norm()).max(1.0);
    if (ids.projected - ids.decomposed).abs() > IDENTITY_TOL * scale {
        return Err(SimError::IdentityMismatch { projected: ids.projected, decomposed: ids.decomposed });
    }
    Ok(ids.projected)
}

/// `sup_{λ ∈ [0, λmax]} (2/√3) |v_Δ|² / |θ0 + λ v_Δ|²`, attained where the
/// quadratic `|θ0 + λ v_Δ|²` is smallest on the interval.
pub fn f_second_bound(theta0: &DenseVector, v_delta: &DenseVector, lambda_max: f64) -> Result<f64> {
    check_dims(theta0, v_delta)?;
    if !(lambda_max >= 0.0 && lambda_max.is_finite()) {
        return Err(invalid(format!("lambda_max {lambda_max} must be finite and non-negative")));
    }
    let vv = v_delta.norm_sq();
    if vv == 0.0 {
        return Ok(0.0);
    }
    let lambda_min = (-theta0.dot(v_delta) / vv).clamp(0.0, lambda_max);
    let closest = ray_point(theta0, v_delta, lambda_min).norm_sq();
    if closest.sqrt() <= MIN_RAY_NORM {
        return Err(SimError::DegenerateDirection("ray passes through the origin"));
    }
    Ok(CURVATURE_CONSTANT * vv / closest)
}

/// `(Γ, H*)` for a C1-satisfying instance.
pub fn gamma_and_horizon(kappa: f64, theta0_norm: f64, v_delta_norm_sq: f64) -> Result<(f64, f64)> {
    if kappa.is_nan() || kappa <= 0.0 {
        return Err(SimError::C1Violated(kappa));
    }
    if !(theta0_norm > 0.0 && v_delta_norm_sq > 0.0) {
        return Err(invalid("norms must be positive"));
    }
    let horizon = kappa * theta0_norm / (4.0 * v_delta_norm_sq);
    let gamma = GAIN_CONSTANT * kappa * kappa / v_delta_norm_sq;
    Ok((gamma, horizon))
}

fn check_probability(delta_prob: f64) -> Result<()> {
    if !(delta_prob > 0.0 && delta_prob < 1.0) {
        return Err(invalid(format!("failure probability {delta_prob} outside (0, 1)")));
    }
    Ok(())
}

/// Dimension above which a uniformly sampled teacher pair satisfies C1 with
/// probability at least `1 - δ`.
pub fn d_star(alpha0: f64, alpha_c: f64, alpha_r: f64, theta0_norm: f64, delta_prob: f64) -> Result<f64> {
    check_probability(delta_prob)?;
    if alpha_c <= alpha_r {
        return Err(SimError::NoPerformanceDelta { alpha_c, alpha_r });
    }
    for a in [alpha0, alpha_c, alpha_r] {
        if !(-1.0..=1.0).contains(&a) {
            return Err(invalid(format!("cosine {a} outside [-1, 1]")));
        }
    }
    if alpha0.abs() >= 1.0 {
        return Err(invalid("d_star is undefined for |alpha0| = 1"));
    }
    let spread = (1.0 - alpha_c * alpha_c).sqrt() + (1.0 - alpha_r * alpha_r).sqrt();
    let ratio = alpha0.abs() * theta0_norm * spread / ((alpha_c - alpha_r) * (1.0 - alpha0 * alpha0));
    Ok(2.0 * (4.0 / delta_prob).ln() * ratio * ratio + 1.0)
}

fn log_term(d: u64, delta_prob: f64) -> f64 {
    ((d as f64 + 1.0) / (delta_prob / 2.0)).ln()
}

/// High-probability bound on `|θ_T - θ̄_T|` for unit-scaled gradients:
/// `η [ sqrt((2dT/B) ln((d+1)/(δ/2))) + 4 √d ln((d+1)/(δ/2)) ]`.
pub fn deviation_bound_unscaled(eta: f64, d: u64, steps: u64, batch: u64, delta_prob: f64) -> Result<f64> {
    check_probability(delta_prob)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(invalid(format!("learning rate {eta} must be finite and non-negative")));
    }
    if d == 0 || steps == 0 || batch == 0 {
        return Err(invalid("d, steps and batch must be positive"));
    }
    let l = log_term(d, delta_prob);
    let df = d as f64;
    Ok(eta * ((2.0 * df * steps as f64 / batch as f64 * l).sqrt() + 4.0 * df.sqrt() * l))
}

/// [`deviation_bound_unscaled`] times `√(2π)`, matching the trainer's step scaling.
pub fn deviation_bound(eta: f64, d: u64, steps: u64, batch: u64, delta_prob: f64) -> Result<f64> {
    Ok(SQRT_TWO_PI * deviation_bound_unscaled(eta, d, steps, batch, delta_prob)?)
}

/// All theory quantities for one (student, teacher pair) instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub kappa: f64,
    pub c1_holds: bool,
    pub gamma: Option<f64>,
    pub horizon: Option<f64>,
    pub d_star: Option<f64>,
    pub eta: Option<f64>,
    pub steps: Option<u64>,
    pub deviation_bound: Option<f64>,
    pub delta_prob: f64,
    pub v_delta_norm_sq: f64,
    pub dim_condition_ok: Option<bool>,
    #[serde(skip)]
    pub v_delta: DenseVector,
}

/// Computes the certificate and, when C1 holds, the prescribed `η` and `T`.
///
/// With `L = ln((d+1)/(δ/2))`, `a = sqrt((2 d H*/B) L)` and `b = 4 √d L`,
/// `η = min(Γ|θ0| / (16 b), Γ²|θ0|² / (256 a²))` keeps `a√η + bη ≤ Γ|θ0|/8`.
pub fn prescribe(
    theta0: &DenseVector,
    teachers: &TeacherPair,
    task: &Task,
    batch: u64,
    delta_prob: f64,
) -> Result<Certificate> {
    check_probability(delta_prob)?;
    if batch == 0 {
        return Err(invalid("batch must be >= 1"));
    }
    let k = kappa(theta0, teachers, task)?;
    let v_delta = population_direction(teachers)?;
    let vv = v_delta.norm_sq();
    let n0 = theta0.norm();
    let alpha0 = task.alignment(theta0)?;
    let d = task.dim() as u64;
    let d_star = d_star(alpha0, teachers.alpha_c(), teachers.alpha_r(), n0, delta_prob).ok();

    let mut cert = Certificate {
        kappa: k,
        c1_holds: k > 0.0,
        gamma: None,
        horizon: None,
        d_star,
        eta: None,
        steps: None,
        deviation_bound: None,
        delta_prob,
        v_delta_norm_sq: vv,
        dim_condition_ok: None,
        v_delta,
    };
    if !cert.c1_holds {
        return Ok(cert);
    }
    let (gamma, horizon) = gamma_and_horizon(k, n0, vv)?;
    let l = log_term(d, delta_prob);
    let a = (2.0 * d as f64 * horizon / batch as f64 * l).sqrt();
    let b = 4.0 * (d as f64).sqrt() * l;
    let eta = (gamma * n0 / (16.0 * b)).min(gamma * gamma * n0 * n0 / (256.0 * a * a));
    let steps_f = (horizon / eta).ceil();
    if !(steps_f.is_finite() && steps_f < u64::MAX as f64) {
        return Err(invalid(format!("prescribed step count {steps_f} is not representable")));
    }
    let steps = (steps_f as u64).max(1);
    cert.gamma = Some(gamma);
    cert.horizon = Some(horizon);
    cert.eta = Some(eta);
    cert.steps = Some(steps);
    cert.deviation_bound = Some(deviation_bound(eta, d, steps, batch, delta_prob)?);
    cert.dim_condition_ok = Some(d as f64 >= ((k + vv) / (delta_prob * delta_prob * k * vv)).ln());
    Ok(cert)
}

/// Lower bound `λ f'(0) - (L/2) λ²` on the alignment gain at ray parameter `λ`.
pub fn taylor_gain_bound(slope: f64, curvature_bound: f64, lambda: f64) -> f64 {
    lambda * slope - 0.5 * curvature_bound * lambda * lambda
}

/// Population 0-1 loss as a function of alignment; convenience for reports.
pub fn loss_of_alignment(alpha: f64) -> f64 {
    alpha.clamp(-1.0, 1.0).acos() / PI
}
