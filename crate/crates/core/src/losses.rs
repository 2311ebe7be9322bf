//! Training losses: smooth-L1 plus a frozen-feature perceptual term for the
//! two pixel losses, and one-minus-cosine for latent consistency.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SphereError};

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Per-term loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pix_recon_l1: f64,
    pub pix_recon_perceptual: f64,
    pub pix_con_l1: f64,
    pub pix_con_perceptual: f64,
    pub lat_con: f64,
}

impl Default for LossWeights {
    /// 32px recipe: (1.0, 1.0, 0.5, 0.5, 0.1).
    fn default() -> Self {
        Self {
            pix_recon_l1: 1.0,
            pix_recon_perceptual: 1.0,
            pix_con_l1: 0.5,
            pix_con_perceptual: 0.5,
            lat_con: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pix_recon_l1,
            self.pix_recon_perceptual,
            self.pix_con_l1,
            self.pix_con_perceptual,
            self.lat_con,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(SphereError::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Anything that produces a multi-scale feature pyramid for `(B, H, W, C)`
/// images. Implementations must not carry trainable state.
pub trait PerceptualFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Fixed random convolutional pyramid: three 3×3 stride-2 convolutions
/// (16, 32, 64 channels) each followed by `tanh`. Its weights are plain
/// tensors, never variables, so no gradient can update them.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<(Tensor, Tensor)>,
    seed: u64,
}

pub const EXTRACTOR_CHANNELS: [usize; 3] = [16, 32, 64];

impl FeatureExtractor {
    pub fn new(in_channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let mut stages = Vec::new();
        let mut c_in = in_channels;
        for &c_out in &EXTRACTOR_CHANNELS {
            let fan_in = c_in * 9;
            let std = (1.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..c_out * fan_in)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let b: Vec<f64> = (0..c_out)
                .map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            stages.push((
                Tensor::from_vec(w, (c_out, c_in, 3, 3), &dev)?.to_dtype(dtype)?,
                Tensor::from_vec(b, (1, c_out, 1, 1), &dev)?.to_dtype(dtype)?,
            ));
            c_in = c_out;
        }
        Ok(Self { stages, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total pooled feature dimension.
    pub fn pooled_dim(&self) -> usize {
        EXTRACTOR_CHANNELS.iter().sum()
    }

    /// Spatially averaged features of every stage, concatenated: `(B, 112)`.
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = self
            .features(x)?
            .iter()
            .map(|f| f.mean((2, 3)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }

    /// All weights flattened, for integrity checks.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (w, b) in &self.stages {
            out.extend(w.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
            out.extend(b.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

impl PerceptualFeatures for FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (w0, _) = &self.stages[0];
        let mut h = x.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(w0.dtype())?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            h = h.conv2d(w, 1, 2, 1, 1)?.broadcast_add(b)?.tanh()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SphereError::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean over elements of `0.5·d²/β` if `|d| < β`, else `|d| − 0.5·β`.
pub fn smooth_l1(a: &Tensor, b: &Tensor, beta: f64) -> Result<Tensor> {
    check_same(a, b)?;
    let ad = a.sub(b)?.abs()?;
    let m = ad.minimum(beta)?;
    let per = (m.sqr()?.affine(0.5 / beta, 0.0)? + ad.sub(&m)?)?;
    Ok(per.mean_all()?)
}

/// Sum over pyramid stages of the mean squared feature difference.
pub fn perceptual(a: &Tensor, b: &Tensor, fx: &dyn PerceptualFeatures) -> Result<Tensor> {
    check_same(a, b)?;
    let fa = fx.features(a)?;
    let fb = fx.features(b)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = x.sub(y)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has at least one stage"))
}

/// `w_l1·smooth_l1 + w_perc·perceptual`; zero-weighted terms are skipped.
pub fn pixel_loss(
    pred: &Tensor,
    target: &Tensor,
    w_l1: f64,
    w_perceptual: f64,
    fx: &dyn PerceptualFeatures,
) -> Result<Tensor> {
    check_same(pred, target)?;
    let mut total = pred.zeros_like()?.sum_all()?;
    if w_l1 != 0.0 {
        total = total.add(&(smooth_l1(pred, target, SMOOTH_L1_BETA)? * w_l1)?)?;
    }
    if w_perceptual != 0.0 {
        total = total.add(&(perceptual(pred, target, fx)? * w_perceptual)?)?;
    }
    Ok(total)
}

/// Reconstruction of `x` from the lightly-noised latent's decode.
pub fn pix_recon_loss(
    x_noisy: &Tensor,
    x: &Tensor,
    weights: &LossWeights,
    fx: &dyn PerceptualFeatures,
) -> Result<Tensor> {
    pixel_loss(x_noisy, x, weights.pix_recon_l1, weights.pix_recon_perceptual, fx)
}

/// Consistency between the heavy-noise decode and the (detached) light-noise
/// decode. The target is detached here so no gradient can flow through it.
pub fn pix_con_loss(
    x_big_noise: &Tensor,
    x_small_noise: &Tensor,
    weights: &LossWeights,
    fx: &dyn PerceptualFeatures,
) -> Result<Tensor> {
    let target = x_small_noise.detach();
    pixel_loss(x_big_noise, &target, weights.pix_con_l1, weights.pix_con_perceptual, fx)
}

/// Batch mean of `1 − cos(v_i, r_i)` on flattened per-sample vectors.
pub fn lat_con_loss(v: &Tensor, re_encoded: &Tensor) -> Result<Tensor> {
    let b = v.dim(0)?;
    let v = v.reshape((b, ()))?;
    let r = re_encoded.reshape((b, ()))?;
    check_same(&v, &r)?;
    let rn = r.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = rn.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.into_iter().fold(f64::INFINITY, f64::min);
    if !(min >= crate::geometry::DEGENERATE_NORM) {
        return Err(SphereError::DegenerateLatent { norm: min });
    }
    let vn = v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let cos = v.mul(&r)?.sum_keepdim(D::Minus1)?.div(&vn.mul(&rn)?)?;
    Ok(cos.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

/// The three per-term values of one batch, in loss units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub pix_recon: f64,
    pub pix_con: f64,
    pub lat_con: f64,
    pub total: f64,
}

/// `pix_recon + pix_con + w_lat·lat_con` (pixel terms carry their own
/// weights). Returns the differentiable total and the logged values.
pub fn total_loss(
    pix_recon: &Tensor,
    pix_con: &Tensor,
    lat_con: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let total = pix_recon.add(pix_con)?.add(&(lat_con * weights.lat_con)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LossReport {
        pix_recon: scalar(pix_recon)?,
        pix_con: scalar(pix_con)?,
        lat_con: scalar(lat_con)?,
        total: scalar(&total)?,
    };
    Ok((total, report))
}
