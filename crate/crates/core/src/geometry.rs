//! Vector algebra and seeded sampling on Gaussians and spheres.
//!
//! Randomness comes from [`RngStream`]: a ChaCha8 generator keyed by a
//! master seed with the ChaCha stream id set to the stream index, so every
//! `(master_seed, stream_index)` pair names one fixed, platform-independent
//! sequence. Gaussians use the Marsaglia polar method on 53-bit uniforms.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SimError};

/// Re-draw threshold for the norm of a projected Gaussian.
const MIN_PROJECTED_NORM: f64 = 1e-30;

/// A real `d`-dimensional vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("vector must have dimension >= 1"));
        }
        if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
            return Err(invalid(format!("entry {i} is not finite")));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self(vec![0.0; dim])
    }

    /// The `i`-th standard basis vector of `R^dim`.
    pub fn basis(dim: usize, i: usize) -> Self {
        assert!(i < dim, "basis index {i} out of range for dimension {dim}");
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Inner product. Panics when dimensions differ; fallible callers go
    /// through [`check_dims`] first.
    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot of mismatched dimensions");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) {
        assert_eq!(self.dim(), x.dim(), "axpy of mismatched dimensions");
        for (s, xi) in self.0.iter_mut().zip(&x.0) {
            *s += a * xi;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(self.0.iter().map(|x| a * x).collect())
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(SimError::DegenerateDirection("cannot normalize a zero vector"));
        }
        Ok(self.scaled(1.0 / n))
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self - other).norm()
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = SimError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

impl Add for &DenseVector {
    type Output = DenseVector;
    fn add(self, rhs: &DenseVector) -> DenseVector {
        assert_eq!(self.dim(), rhs.dim(), "add of mismatched dimensions");
        DenseVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &DenseVector {
    type Output = DenseVector;
    fn sub(self, rhs: &DenseVector) -> DenseVector {
        assert_eq!(self.dim(), rhs.dim(), "sub of mismatched dimensions");
        DenseVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Mul<&DenseVector> for f64 {
    type Output = DenseVector;
    fn mul(self, rhs: &DenseVector) -> DenseVector {
        rhs.scaled(self)
    }
}

impl Neg for &DenseVector {
    type Output = DenseVector;
    fn neg(self) -> DenseVector {
        self.scaled(-1.0)
    }
}

pub fn check_dims(a: &DenseVector, b: &DenseVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SimError::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(())
}

/// SplitMix64 finalizer; a bijection on `u64`.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed and a child index into a fresh 64-bit seed.
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// A single-consumer random stream named by `(master_seed, stream_index)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_index);
        Self { master_seed, stream_index, rng, spare_normal: None }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// A child stream, independent of this one and of its other children.
    /// Does not consume from `self`.
    pub fn fork(&self, child: u64) -> Self {
        Self::new(derive_seed(self.master_seed, self.stream_index), child)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Marsaglia polar method. Each accepted pair
    /// of uniforms yields two normals; the second is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * m);
                return u * m;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Cosine similarity, clamped into `[-1, 1]`.
pub fn cosine(u: &DenseVector, v: &DenseVector) -> Result<f64> {
    check_dims(u, v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(SimError::DegenerateDirection("cosine of a zero vector"));
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `v - (<u, v> / |u|^2) u`.
pub fn project_orthogonal(v: &DenseVector, u: &DenseVector) -> Result<DenseVector> {
    check_dims(v, u)?;
    let uu = u.norm_sq();
    if uu == 0.0 {
        return Err(SimError::DegenerateDirection("projection onto the complement of a zero vector"));
    }
    let mut out = v.clone();
    out.axpy(-u.dot(v) / uu, u);
    Ok(out)
}

pub fn sample_gaussian(dim: usize, rng: &mut RngStream) -> Result<DenseVector> {
    if dim == 0 {
        return Err(invalid("dimension must be >= 1"));
    }
    Ok(DenseVector((0..dim).map(|_| rng.standard_normal()).collect()))
}

/// Uniform on the unit sphere, by normalizing a Gaussian draw.
pub fn sample_unit_sphere(dim: usize, rng: &mut RngStream) -> Result<DenseVector> {
    loop {
        let g = sample_gaussian(dim, rng)?;
        let n = g.norm();
        if n > MIN_PROJECTED_NORM {
            return Ok(DenseVector(g.0.iter().map(|x| x / n).collect()));
        }
    }
}

/// Uniform unit vector in the orthogonal complement of the unit vector `axis`.
pub fn sample_orthogonal_unit(axis: &DenseVector, rng: &mut RngStream) -> Result<DenseVector> {
    if axis.dim() < 2 {
        return Err(invalid("orthogonal complement of a line in R^1 is empty"));
    }
    loop {
        let g = sample_gaussian(axis.dim(), rng)?;
        let p = project_orthogonal(&g, axis)?;
        let n = p.norm();
        if n > MIN_PROJECTED_NORM {
            return Ok(p.scaled(1.0 / n));
        }
    }
}

/// Uniform draw from the sphere slice `{θ : |θ| = 1, cos(θ, θ*) = alpha}`:
/// `alpha θ* + sqrt(1 - alpha²) u` with `u` uniform on the unit sphere of
/// `θ*`'s orthogonal complement.
pub fn sample_at_cosine(theta_star: &DenseVector, alpha: f64, rng: &mut RngStream) -> Result<DenseVector> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("cosine {alpha} outside [-1, 1]")));
    }
    if (theta_star.norm() - 1.0).abs() > 1e-12 {
        return Err(invalid("theta_star must be unit norm"));
    }
    if alpha == 1.0 {
        return Ok(theta_star.clone());
    }
    if alpha == -1.0 {
        return Ok(-theta_star);
    }
    if theta_star.dim() == 1 {
        return Err(SimError::EmptyComplement(alpha));
    }
    let u = sample_orthogonal_unit(theta_star, rng)?;
    let mut out = theta_star.scaled(alpha);
    out.axpy((1.0 - alpha * alpha).sqrt(), &u);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_entries() {
        assert!(DenseVector::new(vec![]).is_err());
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let x = v(&[0.3, -1.2, 4.0]);
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&DenseVector::basis(3, 0), &DenseVector::basis(3, 1)).unwrap(), 0.0);
        // 0.6*1 / (1 * 1)
        let c = cosine(&v(&[0.6, 0.8, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap();
        assert!((c - 0.6).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine(&DenseVector::zeros(2), &v(&[1.0, 0.0])), Err(SimError::DegenerateDirection(_))));
        assert!(matches!(cosine(&v(&[1.0]), &v(&[1.0, 0.0])), Err(SimError::DimensionMismatch { .. })));
    }

    #[test]
    fn cosine_is_clamped() {
        let x = v(&[1e-3, 1e-3, 1e-3]);
        let c = cosine(&x, &x.scaled(7.0)).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn projection_examples() {
        let e1 = DenseVector::basis(3, 0);
        let e2 = DenseVector::basis(3, 1);
        assert!(project_orthogonal(&e1, &e1).unwrap().is_zero());
        assert_eq!(project_orthogonal(&e2, &e1).unwrap(), e2);
        let p = project_orthogonal(&v(&[0.8, -0.4, 0.0]), &e1).unwrap();
        assert_eq!(p, v(&[0.0, -0.4, 0.0]));
        assert!(project_orthogonal(&e1, &DenseVector::zeros(3)).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = sample_gaussian(16, &mut RngStream::new(11, 3)).unwrap();
        let b = sample_gaussian(16, &mut RngStream::new(11, 3)).unwrap();
        let c = sample_gaussian(16, &mut RngStream::new(11, 4)).unwrap();
        let d = sample_gaussian(16, &mut RngStream::new(12, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        let parent = RngStream::new(11, 3);
        assert_ne!(sample_gaussian(4, &mut parent.fork(0)).unwrap(), sample_gaussian(4, &mut parent.fork(1)).unwrap());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(1, 0);
        let n = 100_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let g = sample_gaussian(4, &mut rng).unwrap();
            for (i, x) in g.as_slice().iter().enumerate() {
                sum[i] += x;
                sq[i] += x * x;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let mut rng = RngStream::new(0, 0);
        assert!(sample_gaussian(0, &mut rng).is_err());
        assert!(sample_unit_sphere(0, &mut rng).is_err());
    }

    #[test]
    fn unit_sphere_samples() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..100 {
            let s = sample_unit_sphere(1, &mut rng).unwrap();
            assert!(s.as_slice()[0] == 1.0 || s.as_slice()[0] == -1.0);
        }
        let n = 100_000;
        let mut sum = vec![0.0; 8];
        for _ in 0..n {
            let s = sample_unit_sphere(8, &mut rng).unwrap();
            assert!((s.norm() - 1.0).abs() < 1e-12);
            for (a, x) in sum.iter_mut().zip(s.as_slice()) {
                *a += x;
            }
        }
        for a in sum {
            assert!((a / n as f64).abs() < 0.02);
        }
    }

    #[test]
    fn sample_at_cosine_examples() {
        let mut rng = RngStream::new(3, 0);
        let star = sample_unit_sphere(64, &mut rng).unwrap();
        assert_eq!(sample_at_cosine(&star, 1.0, &mut rng).unwrap(), star);
        assert_eq!(sample_at_cosine(&star, -1.0, &mut rng).unwrap(), -&star);
        let t = sample_at_cosine(&star, 0.0, &mut rng).unwrap();
        assert!(cosine(&t, &star).unwrap().abs() < 1e-12);
        assert!((t.norm() - 1.0).abs() < 1e-12);
        assert!(sample_at_cosine(&star, 1.5, &mut rng).is_err());
        let line = DenseVector::basis(1, 0);
        assert!(matches!(sample_at_cosine(&line, 0.3, &mut rng), Err(SimError::EmptyComplement(_))));
        assert_eq!(sample_at_cosine(&line, 1.0, &mut rng).unwrap(), line);
    }

    #[test]
    fn slice_samples_are_centered_off_axis() {
        // Inner products with a fixed w ⟂ θ* average to zero.
        let d = 16;
        let n = 100_000;
        let alpha = 0.5;
        let star = DenseVector::basis(d, 0);
        let w = DenseVector::basis(d, 5);
        let mut rng = RngStream::new(4, 0);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_at_cosine(&star, alpha, &mut rng).unwrap().dot(&w);
        }
        let bound = 5.0 / (n as f64).sqrt() * (1.0f64 - alpha * alpha).sqrt();
        assert!((sum / n as f64).abs() <= bound);
    }
}
