//! Spherical latent geometry.
//!
//! Everything here is plain `f64` math over flat vectors: projecting latents
//! onto the sphere of radius `√L`, perturbing them with scaled Gaussian noise,
//! converting between perturbation angles and noise magnitudes, interpolating,
//! and measuring how uniformly a set of latents covers the sphere.
//!
//! All randomness comes from an explicitly passed RNG, so every function is
//! deterministic given its seed and safe to call from many threads with
//! independent generators.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SphereError};

/// Norms below this are treated as the zero vector.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Spatial layout `(h, w, d)` a flat latent was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentShape {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl LatentShape {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d }
    }

    /// A 1×1×L layout for latents that never had a spatial grid.
    pub fn flat(len: usize) -> Self {
        Self { h: 1, w: 1, d: len }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn radius(&self) -> f64 {
        (self.len() as f64).sqrt()
    }
}

/// A point on the sphere of radius `√L` in `R^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereVector {
    values: Vec<f64>,
    shape: LatentShape,
}

impl SphereVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Angle between two nonzero vectors, in degrees.
pub fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// RMS-normalizes `z` so that its Euclidean norm is `√L`.
pub fn spherify(z: &[f64], shape: LatentShape) -> Result<SphereVector> {
    if shape.len() != z.len() || z.is_empty() {
        return Err(SphereError::shape(shape.len(), z.len()));
    }
    let n = norm(z);
    if !(n >= DEGENERATE_NORM) {
        return Err(SphereError::DegenerateLatent { norm: n });
    }
    let scale = shape.radius() / n;
    Ok(SphereVector {
        values: z.iter().map(|x| x * scale).collect(),
        shape,
    })
}

/// [`spherify`] for a latent with no spatial layout.
pub fn spherify_flat(z: &[f64]) -> Result<SphereVector> {
    spherify(z, LatentShape::flat(z.len()))
}

/// `n` independent standard-normal draws.
pub fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard normal restricted to `[-limit, limit]`.
fn truncated_normal<R: Rng + ?Sized>(limit: f64, rng: &mut R) -> f64 {
    if limit < 1.0 {
        // uniform proposal, accept with exp(-x²/2) ≥ exp(-1/2)
        loop {
            let x = rng.random_range(-limit..=limit);
            if rng.random::<f64>() < (-0.5 * x * x).exp() {
                return x;
            }
        }
    }
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= limit {
            return x;
        }
    }
}

/// Gaussian prior draw, optionally truncated coordinate-wise to `[-a, a]`.
pub fn prior_draw<R: Rng + ?Sized>(len: usize, rng: &mut R, truncation: Option<f64>) -> Vec<f64> {
    match truncation {
        Some(a) => (0..len).map(|_| truncated_normal(a, rng)).collect(),
        None => gaussian_vec(len, rng),
    }
}

/// Draws a point uniformly distributed on the sphere of radius `√L` by
/// spherifying a Gaussian vector. With `truncation = Some(a)` each Gaussian
/// coordinate is restricted to `[-a, a]` before projection.
pub fn sample_sphere_uniform<R: Rng + ?Sized>(
    shape: LatentShape,
    rng: &mut R,
    truncation: Option<f64>,
) -> SphereVector {
    assert!(!shape.is_empty(), "latent length must be positive");
    loop {
        let e = prior_draw(shape.len(), rng, truncation);
        if let Ok(v) = spherify(&e, shape) {
            return v;
        }
    }
}

/// `spherify(v + σ·e)`. With `σ = 0` the input is returned unchanged.
pub fn noisy_spherify(v: &SphereVector, e: &[f64], sigma: f64) -> Result<SphereVector> {
    if e.len() != v.len() {
        return Err(SphereError::shape(v.len(), e.len()));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let perturbed: Vec<f64> = v.values.iter().zip(e).map(|(a, b)| a + sigma * b).collect();
    spherify(&perturbed, v.shape)
}

/// Noise magnitude `σ = tan(α)` for a perturbation angle in degrees. This is
/// also the expected noise-to-signal ratio of `σ·e` against a sphere point.
pub fn angle_to_sigma(angle_deg: f64) -> Result<f64> {
    if !(0.0..90.0).contains(&angle_deg) {
        return Err(SphereError::InvalidAngle(angle_deg));
    }
    Ok(angle_deg.to_radians().tan())
}

/// Inverse of [`angle_to_sigma`].
pub fn sigma_to_angle(sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(SphereError::InvalidPolicy(format!(
            "noise magnitude must be finite and non-negative, got {sigma}"
        )));
    }
    Ok(sigma.atan().to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterMode {
    /// `σ = r·σ_max` with `r ~ U[0, 1]`.
    SigmaUniform,
    /// `α ~ U[base]` (or `U[mix]` with the mix probability), `σ = tan(α)`.
    AngleUniform,
}

/// How the training noise magnitude is jittered.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePolicy {
    mode: JitterMode,
    base_angle_range: (f64, f64),
    mix_angle_range: Option<(f64, f64)>,
    mix_probability: f64,
    sigma_max: f64,
}

impl NoisePolicy {
    pub fn angle_uniform(
        base_angle_range: (f64, f64),
        mix_angle_range: Option<(f64, f64)>,
        mix_probability: f64,
    ) -> Result<Self> {
        let (lo, hi) = base_angle_range;
        if !(0.0 <= lo && lo < hi && hi < 90.0) {
            return Err(SphereError::InvalidPolicy(format!(
                "base angle range must satisfy 0 <= lo < hi < 90, got [{lo}, {hi}]"
            )));
        }
        if let Some((mlo, mhi)) = mix_angle_range {
            if !(hi <= mlo && mlo < mhi && mhi < 90.0) {
                return Err(SphereError::InvalidPolicy(format!(
                    "mix angle range must satisfy {hi} <= lo < hi < 90, got [{mlo}, {mhi}]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&mix_probability) {
            return Err(SphereError::InvalidPolicy(format!(
                "mix probability must lie in [0, 1], got {mix_probability}"
            )));
        }
        Ok(Self {
            mode: JitterMode::AngleUniform,
            base_angle_range,
            mix_angle_range,
            mix_probability,
            sigma_max: angle_to_sigma(hi)?,
        })
    }

    pub fn sigma_uniform(sigma_max: f64) -> Result<Self> {
        if !(sigma_max > 0.0) || !sigma_max.is_finite() {
            return Err(SphereError::InvalidPolicy(format!(
                "sigma_max must be positive, got {sigma_max}"
            )));
        }
        Ok(Self {
            mode: JitterMode::SigmaUniform,
            base_angle_range: (0.0, sigma_max.atan().to_degrees()),
            mix_angle_range: None,
            mix_probability: 0.0,
            sigma_max,
        })
    }

    pub fn mode(&self) -> JitterMode {
        self.mode
    }

    pub fn base_angle_range(&self) -> (f64, f64) {
        self.base_angle_range
    }

    pub fn mix_angle_range(&self) -> Option<(f64, f64)> {
        self.mix_angle_range
    }

    pub fn mix_probability(&self) -> f64 {
        self.mix_probability
    }

    /// Largest regular noise magnitude; `tan(α_hi)` in angle mode.
    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// Noise magnitude used at inference for noise strength `r`.
    pub fn sigma_at(&self, r: f64) -> f64 {
        r * self.sigma_max
    }

    /// Draws only the jittered magnitude `σ`.
    pub fn draw_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.mode {
            JitterMode::SigmaUniform => self.sigma_at(rng.random::<f64>()),
            JitterMode::AngleUniform => {
                let (lo, hi) = match self.mix_angle_range {
                    Some(mix) if rng.random::<f64>() < self.mix_probability => mix,
                    _ => self.base_angle_range,
                };
                let alpha = lo + (hi - lo) * rng.random::<f64>();
                alpha.to_radians().tan()
            }
        }
    }
}

impl Default for NoisePolicy {
    /// Base range [0°, 80°] mixed with [80°, 85°] at probability 0.1.
    fn default() -> Self {
        NoisePolicy::angle_uniform((0.0, 80.0), Some((80.0, 85.0)), 0.1)
            .expect("default policy is valid")
    }
}

/// One paired noise sample: a shared direction with a large and a small
/// magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub direction: Vec<f64>,
    pub sigma: f64,
    pub sigma_sub: f64,
}

impl NoiseDraw {
    /// Builds a draw with `σ_sub = s·σ`, `s ∈ [0, 0.5]`.
    pub fn with_fraction(direction: Vec<f64>, sigma: f64, s: f64) -> Self {
        debug_assert!((0.0..=0.5).contains(&s));
        Self {
            direction,
            sigma,
            sigma_sub: s * sigma,
        }
    }
}

/// Draws `e ~ N(0, I)`, a jittered `σ`, and `σ_sub = s·σ` with `s ~ U[0, 0.5]`.
pub fn draw_noise<R: Rng + ?Sized>(policy: &NoisePolicy, len: usize, rng: &mut R) -> NoiseDraw {
    let direction = gaussian_vec(len, rng);
    let sigma = policy.draw_sigma(rng);
    let s = 0.5 * rng.random::<f64>();
    NoiseDraw::with_fraction(direction, sigma, s)
}

/// `spherify((1 − t)·a + t·b)`.
pub fn lerp_latents(a: &SphereVector, b: &SphereVector, t: f64) -> Result<SphereVector> {
    if a.shape != b.shape {
        return Err(SphereError::shape(a.shape, b.shape));
    }
    let mixed: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (1.0 - t) * x + t * y)
        .collect();
    spherify(&mixed, a.shape)
}

/// Bilinear interpolation over corners `[top_left, top_right, bottom_left,
/// bottom_right]`: `u` moves left→right, `v` top→bottom. The two linear
/// blends happen in ambient space and only the result is spherified.
pub fn bilerp_latents(corners: [&SphereVector; 4], u: f64, v: f64) -> Result<SphereVector> {
    let shape = corners[0].shape;
    if let Some(c) = corners.iter().find(|c| c.shape != shape) {
        return Err(SphereError::shape(shape, c.shape));
    }
    let weights = [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v];
    let mut mixed = vec![0.0; shape.len()];
    for (c, w) in corners.iter().zip(weights) {
        for (m, x) in mixed.iter_mut().zip(&c.values) {
            *m += w * x;
        }
    }
    spherify(&mixed, shape)
}

/// Projects latents to 3-D with one shared random Gaussian `3×L` matrix and
/// normalizes each result to unit length.
pub fn project_to_3d<R: Rng + ?Sized>(latents: &[SphereVector], rng: &mut R) -> Result<Vec<[f64; 3]>> {
    let Some(first) = latents.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if let Some(bad) = latents.iter().find(|v| v.len() != len) {
        return Err(SphereError::shape(len, bad.len()));
    }
    let rows = [gaussian_vec(len, rng), gaussian_vec(len, rng), gaussian_vec(len, rng)];
    Ok(latents
        .iter()
        .map(|v| {
            let p = [dot(&rows[0], &v.values), dot(&rows[1], &v.values), dot(&rows[2], &v.values)];
            let n = norm(&p).max(f64::MIN_POSITIVE);
            [p[0] / n, p[1] / n, p[2] / n]
        })
        .collect())
}

/// Exact 2-Wasserstein distance between two equal-size 1-D empirical
/// distributions via the sorted coupling.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "1-D Wasserstein needs equal sample sizes");
    assert!(!a.is_empty());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

/// `count` unit directions in `R^len`, orthonormalized (Gram-Schmidt) within
/// blocks of `min(len, count)`.
pub fn orthogonal_directions<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let block = (count - out.len()).min(len);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(block);
        while basis.len() < block {
            let mut g = gaussian_vec(len, rng);
            for q in &basis {
                let c = dot(&g, q);
                g.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
            let n = norm(&g);
            if n > 1e-8 {
                g.iter_mut().for_each(|x| *x /= n);
                basis.push(g);
            }
        }
        out.extend(basis);
    }
    out
}

/// Sliced 2-Wasserstein distance between two equal-size point sets: mean of
/// the exact 1-D distances over `n_projections` orthogonalized directions.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: &[SphereVector],
    b: &[SphereVector],
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(SphereError::shape(format!("two equal sets of >= 2 points"), (a.len(), b.len())));
    }
    let len = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != len) {
        return Err(SphereError::shape(len, bad.len()));
    }
    assert!(n_projections >= 1);
    let dirs = orthogonal_directions(len, n_projections, rng);
    let total: f64 = dirs
        .iter()
        .map(|d| {
            let pa: Vec<f64> = a.iter().map(|v| dot(d, &v.values)).collect();
            let pb: Vec<f64> = b.iter().map(|v| dot(d, &v.values)).collect();
            wasserstein_1d(&pa, &pb)
        })
        .sum();
    Ok(total / dirs.len() as f64)
}

/// Sliced Wasserstein distance between `latents` and an equal-size fresh
/// sample from the uniform distribution on the same sphere.
pub fn sliced_wasserstein_to_uniform<R: Rng + ?Sized>(
    latents: &[SphereVector],
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if latents.len() < 2 {
        return Err(SphereError::shape("at least 2 latents", latents.len()));
    }
    let shape = latents[0].shape;
    let reference: Vec<SphereVector> = (0..latents.len())
        .map(|_| sample_sphere_uniform(shape, rng, None))
        .collect();
    sliced_wasserstein(latents, &reference, n_projections, rng)
}
