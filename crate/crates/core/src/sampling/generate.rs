//! Few-step generation and image editing on top of [`SphereModel`].

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::plan::{CfgPosition, EditMode, EditPlan, SamplerPlan, Stitch};
use crate::error::{Result, SphereError};
use crate::geometry::{prior_draw, NoisePolicy};
use crate::network::{noisy_spherify_batch, spherify_batch, Condition, Label, PassCounts, SphereModel};

/// `uncond + s·(cond − uncond)`; `s = 1` and `s = 0` return an input exactly.
pub fn apply_cfg_tensor(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if cond.dims() != uncond.dims() {
        return Err(SphereError::shape(cond.elem_count(), uncond.elem_count()));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    Ok(uncond.add(&(cond.sub(uncond)? * scale)?)?)
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// `(B, H, W, C)` images in `[-1, 1]`.
    pub images: Tensor,
    /// Function evaluations the plan declares.
    pub nfe: usize,
    /// Forward passes actually run, by kind.
    pub passes: PassCounts,
    /// Noise direction used at each refinement step (steps 2..=T).
    pub refinement_noise: Vec<Tensor>,
}

fn decode_with_cfg(model: &SphereModel, v: &Tensor, cond: &Condition, plan: &SamplerPlan) -> Result<Tensor> {
    let x = model.decode(v, cond)?;
    if plan.cfg_position.uses_decoder() {
        let x_null = model.decode(v, &cond.to_null())?;
        return apply_cfg_tensor(&x, &x_null, plan.per_position_scale());
    }
    Ok(x)
}

fn encode_with_cfg(model: &SphereModel, x: &Tensor, cond: &Condition, plan: &SamplerPlan) -> Result<Tensor> {
    let z = model.encode(x, cond)?;
    if plan.cfg_position.uses_encoder() {
        let z_null = model.encode(x, &cond.to_null())?;
        return apply_cfg_tensor(&z, &z_null, plan.per_position_scale());
    }
    Ok(z)
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    let ok = x
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(SphereError::NonFiniteSample { step })
    }
}

fn diff(after: PassCounts, before: PassCounts) -> PassCounts {
    PassCounts {
        encoder_cond: after.encoder_cond - before.encoder_cond,
        encoder_null: after.encoder_null - before.encoder_null,
        decoder_cond: after.decoder_cond - before.decoder_cond,
        decoder_null: after.decoder_null - before.decoder_null,
    }
}

fn noise_tensor(model: &SphereModel, b: usize, rng: &mut ChaCha8Rng, truncation: Option<f64>) -> Result<Tensor> {
    let len = model.config().latent_len();
    let data: Vec<f64> = (0..b).flat_map(|_| prior_draw(len, rng, truncation)).collect();
    Ok(Tensor::from_vec(data, (b, len), model.params().device())?.to_dtype(model.dtype())?)
}

/// Runs the sampling loop from a given first-step latent `v0: (B, L)`.
///
/// `e0` is the step-one prior draw reused by refinement steps when the plan
/// shares noise; otherwise each refinement step draws a fresh direction.
pub fn generate_from(
    model: &SphereModel,
    v0: &Tensor,
    e0: &Tensor,
    cond: &Condition,
    plan: &SamplerPlan,
    policy: &NoisePolicy,
    rng: &mut ChaCha8Rng,
) -> Result<GenerateOutput> {
    plan.validate()?;
    let before = model.counter().snapshot();
    let b = v0.dim(0)?;
    let mut x = decode_with_cfg(model, v0, cond, plan)?;
    check_finite(&x, 1)?;
    let mut refinement_noise = Vec::new();
    for t in 2..=plan.steps {
        let z = encode_with_cfg(model, &x, cond, plan)?;
        let v = spherify_batch(&z)?;
        let e = if plan.share_noise {
            e0.clone()
        } else {
            noise_tensor(model, b, rng, None)?
        };
        let sigma = plan.r_at(t) * policy.sigma_max();
        let sigma = Tensor::full(sigma, b, model.params().device())?.to_dtype(model.dtype())?;
        let v = noisy_spherify_batch(&v, &e, &sigma)?;
        refinement_noise.push(e);
        x = decode_with_cfg(model, &v, cond, plan)?;
        check_finite(&x, t)?;
    }
    Ok(GenerateOutput {
        images: x,
        nfe: plan.nfe(),
        passes: diff(model.counter().snapshot(), before),
        refinement_noise,
    })
}

/// Generates one image per label following the plan (seeded by `plan.seed`).
pub fn generate(model: &SphereModel, labels: &[Label], plan: &SamplerPlan, policy: &NoisePolicy) -> Result<GenerateOutput> {
    plan.validate()?;
    if labels.is_empty() {
        return Err(SphereError::Config("nothing to generate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let e0 = noise_tensor(model, labels.len(), &mut rng, plan.truncation)?;
    let v0 = spherify_batch(&e0)?;
    generate_from(model, &v0, &e0, &Condition::labels(labels), plan, policy, &mut rng)
}

/// `D(spherify(E(x, ∅)), ∅)` with no noise.
pub fn reconstruct(model: &SphereModel, x: &Tensor) -> Result<Tensor> {
    let cond = Condition::null(x.dim(0)?);
    let v = spherify_batch(&model.encode(x, &cond)?)?;
    let out = model.decode(&v, &cond)?;
    check_finite(&out, 1)?;
    Ok(out)
}

/// Encode/noise/decode iterations starting from real images.
fn edit_loop(
    model: &SphereModel,
    x0: &Tensor,
    cond: &Condition,
    plan: &EditPlan,
    policy: &NoisePolicy,
) -> Result<Tensor> {
    let b = x0.dim(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let e = noise_tensor(model, b, &mut rng, None)?;
    let mut x = x0.to_dtype(model.dtype())?;
    for k in 1..=plan.steps {
        let v = spherify_batch(&model.encode(&x, cond)?)?;
        let sigma = plan.r_at(k + 1) * policy.sigma_max();
        let v = if sigma > 0.0 {
            let s = Tensor::full(sigma, b, model.params().device())?.to_dtype(model.dtype())?;
            noisy_spherify_batch(&v, &e, &s)?
        } else {
            v
        };
        x = model.decode(&v, cond)?;
        check_finite(&x, k)?;
    }
    Ok(x)
}

/// Re-renders images under `plan.target_class` without guidance.
pub fn manipulate(model: &SphereModel, x: &Tensor, plan: &EditPlan, policy: &NoisePolicy) -> Result<Tensor> {
    let target = plan
        .target_class
        .ok_or_else(|| SphereError::Config("manipulation needs a target class".into()))?;
    let n_classes = model.config().n_classes;
    if !model.config().is_conditional() || target >= n_classes {
        return Err(SphereError::InvalidClass { id: target, n_classes });
    }
    let cond = Condition::repeat(Label::Class(target), x.dim(0)?);
    edit_loop(model, x, &cond, plan, policy)
}

/// Hard pixel stitch of two `(B, H, W, C)` batches.
pub fn stitch(a: &Tensor, b: &Tensor, how: Stitch) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(SphereError::shape(a.elem_count(), b.elem_count()));
    }
    let (_, h, w, _) = a.dims4()?;
    let (axis, at, extent) = match how {
        Stitch::LeftRight { at } => (2, at, w),
        Stitch::TopBottom { at } => (1, at, h),
    };
    if at > extent {
        return Err(SphereError::Config(format!("stitch boundary {at} outside 0..={extent}")));
    }
    if at == 0 {
        return Ok(b.clone());
    }
    if at == extent {
        return Ok(a.clone());
    }
    Ok(Tensor::cat(&[a.narrow(axis, 0, at)?, b.narrow(axis, at, extent - at)?], axis)?)
}

/// Stitches `a` and `b` and harmonizes the composite with the edit loop.
/// With zero steps the raw composite is returned.
pub fn crossover(
    model: &SphereModel,
    a: &Tensor,
    b: &Tensor,
    plan: &EditPlan,
    policy: &NoisePolicy,
) -> Result<Tensor> {
    if plan.mode != EditMode::Crossover {
        return Err(SphereError::Config("crossover needs a crossover plan".into()));
    }
    let how = plan
        .stitch
        .ok_or_else(|| SphereError::Config("crossover needs a stitch boundary".into()))?;
    let composite = stitch(a, b, how)?;
    if plan.steps == 0 {
        return Ok(composite);
    }
    let n = composite.dim(0)?;
    let cond = match plan.target_class {
        Some(c) => Condition::repeat(Label::Class(c), n),
        None => Condition::null(n),
    };
    edit_loop(model, &composite, &cond, plan, policy)
}

/// Whether a plan's guidance does anything for this model.
pub fn cfg_applicable(model: &SphereModel, plan: &SamplerPlan) -> bool {
    plan.cfg_position != CfgPosition::None && model.config().is_conditional()
}
