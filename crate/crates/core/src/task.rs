//! Ground truth, 0-1 loss, and preference-pair synthesis from two teachers.
//!
//! Every labeler uses the same boundary convention: `<θ, x> = 0` labels 1.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{invalid, Result, SimError};
use crate::geometry::{
    check_dims, cosine, sample_at_cosine, sample_gaussian, sample_unit_sphere, DenseVector, RngStream,
};

const UNIT_TOL: f64 = 1e-12;
const TEACHER_ALIGNMENT_TOL: f64 = 1e-10;

/// The classification task: a unit-norm ground-truth direction `θ*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Task {
    theta_star: DenseVector,
}

impl Task {
    pub fn new(theta_star: DenseVector) -> Result<Self> {
        if (theta_star.norm() - 1.0).abs() > UNIT_TOL {
            return Err(invalid("theta_star must be unit norm"));
        }
        Ok(Self { theta_star })
    }

    /// Ground truth along the given (nonzero) direction.
    pub fn from_direction(direction: &DenseVector) -> Result<Self> {
        Self::new(direction.normalized()?)
    }

    /// `θ*` drawn uniformly from the unit sphere.
    pub fn sample(dim: usize, rng: &mut RngStream) -> Result<Self> {
        Self::new(sample_unit_sphere(dim, rng)?)
    }

    pub fn theta_star(&self) -> &DenseVector {
        &self.theta_star
    }

    pub fn dim(&self) -> usize {
        self.theta_star.dim()
    }

    pub fn alignment(&self, theta: &DenseVector) -> Result<f64> {
        cosine(theta, &self.theta_star)
    }
}

/// Two unit-norm teachers with `alpha_c > alpha_r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherPair {
    theta_c: DenseVector,
    theta_r: DenseVector,
    alpha_c: f64,
    alpha_r: f64,
}

impl TeacherPair {
    /// Validates unit norms against `task` and computes the alignments.
    pub fn new(theta_c: DenseVector, theta_r: DenseVector, task: &Task) -> Result<Self> {
        for t in [&theta_c, &theta_r] {
            check_dims(task.theta_star(), t)?;
            if (t.norm() - 1.0).abs() > UNIT_TOL {
                return Err(invalid("teacher parameters must be unit norm"));
            }
        }
        let alpha_c = task.alignment(&theta_c)?;
        let alpha_r = task.alignment(&theta_r)?;
        if alpha_c <= alpha_r {
            return Err(SimError::NoPerformanceDelta { alpha_c, alpha_r });
        }
        Ok(Self { theta_c, theta_r, alpha_c, alpha_r })
    }

    /// Builds a pair without the unit-norm or ordering checks.
    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(theta_c: DenseVector, theta_r: DenseVector, task: &Task) -> Self {
        let alpha_c = task.alignment(&theta_c).unwrap();
        let alpha_r = task.alignment(&theta_r).unwrap();
        Self { theta_c, theta_r, alpha_c, alpha_r }
    }

    pub fn theta_c(&self) -> &DenseVector {
        &self.theta_c
    }

    pub fn theta_r(&self) -> &DenseVector {
        &self.theta_r
    }

    pub fn alpha_c(&self) -> f64 {
        self.alpha_c
    }

    pub fn alpha_r(&self) -> f64 {
        self.alpha_r
    }

    pub fn dim(&self) -> usize {
        self.theta_c.dim()
    }

    /// The same teachers with chosen and rejected roles exchanged. The
    /// result deliberately violates `alpha_c > alpha_r`; it exists for the
    /// reversed-preference control.
    pub fn swapped(&self) -> Self {
        Self {
            theta_c: self.theta_r.clone(),
            theta_r: self.theta_c.clone(),
            alpha_c: self.alpha_r,
            alpha_r: self.alpha_c,
        }
    }
}

/// A covariate with chosen/rejected pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceExample {
    pub x: DenseVector,
    pub y_c: bool,
    pub y_r: bool,
}

/// `1{<θ, x> >= 0}` without dimension checks.
#[inline]
pub(crate) fn sign_label(theta: &DenseVector, x: &DenseVector) -> bool {
    theta.dot(x) >= 0.0
}

pub fn true_label(task: &Task, x: &DenseVector) -> Result<bool> {
    check_dims(task.theta_star(), x)?;
    Ok(sign_label(task.theta_star(), x))
}

/// Population 0-1 loss: `arccos(cos(θ, θ*)) / π`.
pub fn zo_loss_exact(theta: &DenseVector, task: &Task) -> Result<f64> {
    Ok(task.alignment(theta)?.acos() / PI)
}

/// Monte Carlo estimate of the 0-1 loss over `n` Gaussian covariates.
pub fn zo_loss_mc(theta: &DenseVector, task: &Task, n: usize, rng: &mut RngStream) -> Result<f64> {
    check_dims(task.theta_star(), theta)?;
    if n == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    let mut errors = 0usize;
    for _ in 0..n {
        let x = sample_gaussian(theta.dim(), rng)?;
        if sign_label(theta, &x) != sign_label(task.theta_star(), &x) {
            errors += 1;
        }
    }
    Ok(errors as f64 / n as f64)
}

/// Cosine alignment of a classifier with the given population accuracy.
pub fn accuracy_to_alpha(acc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(invalid(format!("accuracy {acc} outside [0, 1]")));
    }
    Ok((PI * (1.0 - acc)).cos())
}

pub fn alpha_to_accuracy(alpha: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("cosine {alpha} outside [-1, 1]")));
    }
    Ok(1.0 - alpha.acos() / PI)
}

pub fn make_pair(teachers: &TeacherPair, x: DenseVector) -> Result<PreferenceExample> {
    check_dims(teachers.theta_c(), &x)?;
    let y_c = sign_label(teachers.theta_c(), &x);
    let y_r = sign_label(teachers.theta_r(), &x);
    Ok(PreferenceExample { x, y_c, y_r })
}

/// Two independent draws from the sphere slices at `alpha_c` and `alpha_r`.
pub fn sample_teacher_pair(task: &Task, alpha_c: f64, alpha_r: f64, rng: &mut RngStream) -> Result<TeacherPair> {
    if alpha_c <= alpha_r {
        return Err(SimError::NoPerformanceDelta { alpha_c, alpha_r });
    }
    let theta_c = sample_at_cosine(task.theta_star(), alpha_c, rng)?;
    let theta_r = sample_at_cosine(task.theta_star(), alpha_r, rng)?;
    let pair = TeacherPair::new(theta_c, theta_r, task)?;
    debug_assert!((pair.alpha_c - alpha_c).abs() <= TEACHER_ALIGNMENT_TOL);
    debug_assert!((pair.alpha_r - alpha_r).abs() <= TEACHER_ALIGNMENT_TOL);
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn true_label_examples() {
        let task = Task::new(v(&[0.6, 0.8])).unwrap();
        assert!(true_label(&task, &v(&[0.6, 0.8])).unwrap());
        assert!(!true_label(&task, &v(&[-0.6, -0.8])).unwrap());
        let axis = Task::new(DenseVector::basis(3, 0)).unwrap();
        assert!(true_label(&axis, &DenseVector::basis(3, 2)).unwrap());
        assert!(true_label(&axis, &DenseVector::basis(2, 0)).is_err());
    }

    #[test]
    fn zo_loss_exact_examples() {
        let task = Task::new(DenseVector::basis(3, 0)).unwrap();
        assert_eq!(zo_loss_exact(&DenseVector::basis(3, 0), &task).unwrap(), 0.0);
        assert!((zo_loss_exact(&DenseVector::basis(3, 1), &task).unwrap() - 0.5).abs() < 1e-15);
        let c = 0.809_016_994_374_947_4;
        let theta = v(&[c, (1.0f64 - c * c).sqrt(), 0.0]);
        assert!((zo_loss_exact(&theta, &task).unwrap() - 0.2).abs() < 1e-12);
        assert!(zo_loss_exact(&DenseVector::zeros(3), &task).is_err());
    }

    #[test]
    fn zo_loss_mc_examples() {
        let mut rng = RngStream::new(5, 0);
        let task = Task::sample(6, &mut rng).unwrap();
        let star = task.theta_star().clone();
        assert_eq!(zo_loss_mc(&star, &task, 1000, &mut rng).unwrap(), 0.0);
        assert_eq!(zo_loss_mc(&-&star, &task, 1000, &mut rng).unwrap(), 1.0);
        assert!(zo_loss_mc(&star, &task, 0, &mut rng).is_err());

        let c = 0.809_016_994_374_947_4;
        let theta = sample_at_cosine(&star, c, &mut rng).unwrap();
        let est = zo_loss_mc(&theta, &task, 100_000, &mut rng).unwrap();
        assert!((est - 0.2).abs() < 0.01, "{est}");
    }

    #[test]
    fn accuracy_alpha_conversion() {
        assert_eq!(accuracy_to_alpha(1.0).unwrap(), 1.0);
        assert!(accuracy_to_alpha(0.5).unwrap().abs() < 1e-15);
        assert!((accuracy_to_alpha(0.8).unwrap() - 0.809_017).abs() < 1e-6);
        assert!(accuracy_to_alpha(1.2).is_err());
        assert!(accuracy_to_alpha(-0.1).is_err());
        assert!(alpha_to_accuracy(1.1).is_err());
        for i in 0..=100 {
            let a = -1.0 + 2.0 * i as f64 / 100.0;
            let back = accuracy_to_alpha(alpha_to_accuracy(a).unwrap()).unwrap();
            assert!((back - a).abs() < 1e-12, "{a} -> {back}");
        }
    }

    #[test]
    fn make_pair_examples() {
        let task = Task::new(v(&[0.0, 0.0, 1.0])).unwrap();
        // Teachers must satisfy alpha_c > alpha_r against this θ*.
        let e1 = DenseVector::basis(3, 0);
        let e2 = DenseVector::basis(3, 1);
        let c = v(&[0.6, 0.0, 0.8]);
        let pair = TeacherPair::new(c.clone(), e1.clone(), &task).unwrap();
        let ex = make_pair(&pair, c.clone()).unwrap();
        assert!(ex.y_c && ex.y_r);

        let flat = Task::new(v(&[1.0, 1.0, 0.0]).normalized().unwrap()).unwrap();
        let pair = TeacherPair::new(e1.clone(), e2.clone(), &Task::new(v(&[0.8, 0.6, 0.0])).unwrap()).unwrap();
        let ex = make_pair(&pair, v(&[1.0, -1.0, 0.0])).unwrap();
        assert_eq!((ex.y_c, ex.y_r), (true, false));
        assert!(TeacherPair::new(e1.clone(), e2.clone(), &flat).is_err());

        let x = v(&[0.3, -0.7, 0.2]);
        let a = make_pair(&pair, x.clone()).unwrap();
        let b = make_pair(&pair, -&x).unwrap();
        assert_eq!((a.y_c, a.y_r), (!b.y_c, !b.y_r));
        assert!(make_pair(&pair, DenseVector::zeros(2)).is_err());
    }

    #[test]
    fn teacher_pair_sampling() {
        let mut rng = RngStream::new(6, 0);
        let task = Task::sample(32, &mut rng).unwrap();
        let pair = sample_teacher_pair(&task, 1.0, 0.2, &mut rng).unwrap();
        assert_eq!(pair.theta_c(), task.theta_star());
        let pair = sample_teacher_pair(&task, 0.587_785, 0.309_017, &mut rng).unwrap();
        assert!((pair.alpha_c() - 0.587_785).abs() < 1e-10);
        assert!((pair.alpha_r() - 0.309_017).abs() < 1e-10);
        assert!((alpha_to_accuracy(pair.alpha_c()).unwrap() - 0.7).abs() < 1e-6);
        assert!((alpha_to_accuracy(pair.alpha_r()).unwrap() - 0.6).abs() < 1e-6);
        assert!(matches!(sample_teacher_pair(&task, 0.3, 0.3, &mut rng), Err(SimError::NoPerformanceDelta { .. })));
        assert!(sample_teacher_pair(&task, 0.2, 0.4, &mut rng).is_err());
    }

    #[test]
    fn sampled_teachers_sit_on_their_slices() {
        let mut rng = RngStream::new(7, 0);
        for d in [2, 3, 17, 128] {
            let task = Task::sample(d, &mut rng).unwrap();
            for _ in 0..50 {
                let a = 2.0 * rng.uniform() - 1.0;
                let b = a * rng.uniform();
                let (hi, lo) = if a > b { (a, b) } else { (b, a) };
                let pair = sample_teacher_pair(&task, hi, lo, &mut rng).unwrap();
                for (t, want) in [(pair.theta_c(), hi), (pair.theta_r(), lo)] {
                    assert!((cosine(t, task.theta_star()).unwrap() - want).abs() <= 1e-12);
                    assert!((t.norm() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    fn binomial_4sigma(p: f64, n: usize) -> f64 {
        4.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn disagreement_rate_follows_angle() {
        let mut rng = RngStream::new(8, 0);
        let task = Task::sample(12, &mut rng).unwrap();
        let pair = sample_teacher_pair(&task, 0.5, -0.2, &mut rng).unwrap();
        let n = 100_000;
        let mut disagree = 0usize;
        let mut chosen_correct = 0usize;
        for _ in 0..n {
            let x = sample_gaussian(12, &mut rng).unwrap();
            let y = sign_label(task.theta_star(), &x);
            let ex = make_pair(&pair, x).unwrap();
            disagree += (ex.y_c != ex.y_r) as usize;
            chosen_correct += (ex.y_c == y) as usize;
        }
        let p = cosine(pair.theta_c(), pair.theta_r()).unwrap().acos() / PI;
        assert!((disagree as f64 / n as f64 - p).abs() <= binomial_4sigma(p, n));
        let q = 1.0 - zo_loss_exact(pair.theta_c(), &task).unwrap();
        assert!((chosen_correct as f64 / n as f64 - q).abs() <= binomial_4sigma(q, n));
    }

    #[test]
    fn mc_loss_tracks_exact_loss() {
        let mut rng = RngStream::new(9, 0);
        let n = 100_000;
        for _ in 0..20 {
            let task = Task::sample(10, &mut rng).unwrap();
            let theta = sample_gaussian(10, &mut rng).unwrap();
            let p = zo_loss_exact(&theta, &task).unwrap();
            let est = zo_loss_mc(&theta, &task, n, &mut rng).unwrap();
            assert!((est - p).abs() <= binomial_4sigma(p, n).max(1e-12));
        }
    }
}
