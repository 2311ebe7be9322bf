//! Noisy-spherification training.
//!
//! One step: encode, spherify, draw a shared noise direction with a large and
//! a small magnitude, decode both perturbed latents, re-encode the heavy-noise
//! decode, and take one AdamW step on the weighted sum of the three losses.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, epoch_order, LabeledDataset};
use crate::error::{Result, SphereError};
use crate::geometry::{draw_noise, NoiseDraw, NoisePolicy};
use crate::losses::{
    lat_con_loss, pix_con_loss, pix_recon_loss, total_loss, FeatureExtractor, LossReport, LossWeights,
    PerceptualFeatures,
};
use crate::network::{
    noisy_spherify_batch, spherify_batch, ArrayData, Checkpoint, Condition, Label, NamedArray, ParamStore,
    SphereModel,
};

/// Header of the metrics CSV.
pub const METRICS_HEADER: &str = "step,l_pix_recon,l_pix_con,l_lat_con,total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SphereError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.warmup_epochs >= self.total_epochs {
            return err(format!(
                "warmup_epochs ({}) must be < total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.min_learning_rate <= self.learning_rate) || !(self.min_learning_rate >= 0.0) {
            return err(format!(
                "need 0 <= min_learning_rate ({}) <= learning_rate ({})",
                self.min_learning_rate, self.learning_rate
            ));
        }
        if !(self.grad_clip > 0.0) {
            return err(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len / self.batch_size).max(1) as u64
    }
}

/// Linear warmup from 0 to `learning_rate`, then cosine annealing to
/// `min_learning_rate` at the final step.
pub fn lr_at(step: u64, cfg: &TrainConfig, steps_per_epoch: u64) -> f64 {
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    let total = cfg.total_epochs as u64 * steps_per_epoch;
    if step < warmup {
        return cfg.learning_rate * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    cfg.min_learning_rate
        + 0.5 * (cfg.learning_rate - cfg.min_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Independent RNG streams, each a pure function of `(seed, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Augment = 2,
    Noise = 3,
    Dropout = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(index as u128 * (1u128 << 40));
    let mixed: u64 = rng.random();
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Replaces each label by null with probability `p`.
pub fn cfg_dropout<R: Rng + ?Sized>(labels: &[usize], p: f64, rng: &mut R) -> Vec<Label> {
    labels
        .iter()
        .map(|&y| {
            if rng.random::<f64>() < p {
                Label::Null
            } else {
                Label::Class(y)
            }
        })
        .collect()
}

/// Decoupled-weight-decay Adam with tensor-valued moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params.iter() {
            let theta = var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => (g * grad_scale)?,
                None => theta.zeros_like()?,
            };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => theta.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => theta.zeros_like()?,
            };
            let m = ((m_prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = (&m / bc1)?.div(&((&v / bc2)?.sqrt()? + self.eps)?)?;
            let decayed = (theta.detach() * (1.0 - lr * self.weight_decay))?;
            let next = decayed.sub(&(update * lr)?)?;
            var.set(&next.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        let mut out = Vec::new();
        for (name, m) in &self.m {
            out.push(NamedArray::from_tensor(format!("adam.m/{name}"), m)?);
        }
        for (name, v) in &self.v {
            out.push(NamedArray::from_tensor(format!("adam.v/{name}"), v)?);
        }
        Ok(out)
    }

    pub fn load_arrays(&mut self, ckpt: &Checkpoint, dtype: DType) -> Result<()> {
        for a in &ckpt.arrays {
            if let Some(name) = a.name.strip_prefix("adam.m/") {
                self.m.insert(name.to_string(), a.to_tensor(dtype)?);
            } else if let Some(name) = a.name.strip_prefix("adam.v/") {
                self.v.insert(name.to_string(), a.to_tensor(dtype)?);
            }
        }
        self.t = ckpt.step;
        Ok(())
    }
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            optimizer: AdamW::new(cfg),
        }
    }
}

/// All tensors produced by one forward pass of the training objective.
pub struct ObjectiveOutput {
    pub total: Tensor,
    pub report: LossReport,
    pub v: Tensor,
    pub x_small_noise: Tensor,
    pub x_big_noise: Tensor,
}

/// Forward pass of the full objective for fixed noise draws (one per sample).
pub fn objective(
    model: &SphereModel,
    fx: &dyn PerceptualFeatures,
    x: &Tensor,
    cond: &Condition,
    draws: &[NoiseDraw],
    weights: &LossWeights,
) -> Result<ObjectiveOutput> {
    let b = x.dim(0)?;
    if draws.len() != b {
        return Err(SphereError::shape(b, draws.len()));
    }
    let len = model.config().latent_len();
    let dev = model.params().device().clone();
    let dtype = model.dtype();
    let x = x.to_dtype(dtype)?;

    let z = model.encode(&x, cond)?;
    let v = spherify_batch(&z)?;

    let e: Vec<f64> = draws.iter().flat_map(|d| d.direction.iter().copied()).collect();
    if e.len() != b * len {
        return Err(SphereError::shape(b * len, e.len()));
    }
    let e = Tensor::from_vec(e, (b, len), &dev)?.to_dtype(dtype)?;
    let sigma = Tensor::from_vec(draws.iter().map(|d| d.sigma).collect::<Vec<_>>(), b, &dev)?.to_dtype(dtype)?;
    let sigma_sub =
        Tensor::from_vec(draws.iter().map(|d| d.sigma_sub).collect::<Vec<_>>(), b, &dev)?.to_dtype(dtype)?;

    let v_big = noisy_spherify_batch(&v, &e, &sigma)?;
    let v_small = noisy_spherify_batch(&v, &e, &sigma_sub)?;
    let x_small = model.decode(&v_small, cond)?;
    let x_big = model.decode(&v_big, cond)?;
    let re = model.encode(&x_big, cond)?;

    let l_recon = pix_recon_loss(&x_small, &x, weights, fx)?;
    let l_con = pix_con_loss(&x_big, &x_small, weights, fx)?;
    let l_lat = lat_con_loss(&v, &re)?;
    let (total, report) = total_loss(&l_recon, &l_con, &l_lat, weights)?;
    Ok(ObjectiveOutput {
        total,
        report,
        v,
        x_small_noise: x_small,
        x_big_noise: x_big,
    })
}

/// Global L2 norm over all parameter gradients.
pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Everything a training step needs besides the model and its state.
pub struct StepContext<'a> {
    pub fx: &'a FeatureExtractor,
    pub policy: &'a NoisePolicy,
    pub weights: &'a LossWeights,
    pub train: &'a TrainConfig,
    pub steps_per_epoch: u64,
}

/// One optimizer update on `(images, labels)`. Noise and label dropout are
/// drawn from streams keyed by the step counter.
pub fn train_step(
    model: &SphereModel,
    state: &mut TrainState,
    ctx: &StepContext<'_>,
    images: &Tensor,
    labels: &[usize],
    batch_index: usize,
) -> Result<LossReport> {
    let seed = ctx.train.seed;
    let step = state.step;
    let b = images.dim(0)?;
    let len = model.config().latent_len();

    let cond = if model.config().is_conditional() {
        let mut rng = stream_rng(seed, Stream::Dropout, step);
        Condition::labels(&cfg_dropout(labels, model.config().cfg_null_drop_prob, &mut rng))
    } else {
        Condition::null(b)
    };
    let mut noise_rng = stream_rng(seed, Stream::Noise, step);
    let draws: Vec<NoiseDraw> = (0..b).map(|_| draw_noise(ctx.policy, len, &mut noise_rng)).collect();

    let out = objective(model, ctx.fx, images, &cond, &draws, ctx.weights)?;
    let r = out.report;
    if ![r.pix_recon, r.pix_con, r.lat_con, r.total].iter().all(|x| x.is_finite()) {
        return Err(SphereError::NonFiniteLoss {
            step,
            batch_index,
            detail: format!("{r:?}, labels {labels:?}"),
        });
    }
    let grads = out.total.backward()?;
    let norm = grad_norm(model.params(), &grads)?;
    let scale = if norm > ctx.train.grad_clip { ctx.train.grad_clip / norm } else { 1.0 };
    let lr = lr_at(step + 1, ctx.train, ctx.steps_per_epoch);
    state.optimizer.step(model.params(), &grads, lr, scale)?;
    state.step += 1;
    Ok(r)
}

/// Paths written by [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub out_dir: PathBuf,
}

impl TrainPaths {
    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join("final.ckpt")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.out_dir.join(format!("step-{step:07}.ckpt"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<(u64, LossReport)>,
}

/// Checkpoint carrying parameters and optimizer moments.
pub fn training_checkpoint(model: &SphereModel, state: &TrainState, seed: u64) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::from_model(model, state.step, seed)?;
    ckpt.arrays.extend(state.optimizer.to_arrays()?);
    Ok(ckpt)
}

/// Restores a model and optimizer from a training checkpoint.
pub fn resume_from(ckpt: &Checkpoint, train: &TrainConfig, dtype: DType) -> Result<(SphereModel, TrainState)> {
    let model = ckpt.to_model(dtype)?;
    let mut state = TrainState::new(train);
    state.optimizer.load_arrays(ckpt, dtype)?;
    state.step = ckpt.step;
    Ok((model, state))
}

pub struct TrainingRun<'a> {
    pub dataset: &'a LabeledDataset,
    pub train: &'a TrainConfig,
    pub policy: &'a NoisePolicy,
    pub weights: &'a LossWeights,
    pub flip_prob: f64,
    pub extractor_seed: u64,
}

/// Runs (or resumes) training to `total_epochs`, appending to the metrics
/// CSV and writing periodic and final checkpoints.
pub fn run_training(
    run: &TrainingRun<'_>,
    model: &SphereModel,
    state: &mut TrainState,
    paths: Option<&TrainPaths>,
) -> Result<TrainOutcome> {
    let ds = run.dataset;
    if ds.is_empty() {
        return Err(SphereError::EmptyDataset("training set has no images".into()));
    }
    run.train.validate()?;
    let fx = FeatureExtractor::new(model.config().channels, run.extractor_seed, model.dtype())?;
    let spe = run.train.steps_per_epoch(ds.len());
    let total_steps = spe * run.train.total_epochs as u64;
    let ctx = StepContext {
        fx: &fx,
        policy: run.policy,
        weights: run.weights,
        train: run.train,
        steps_per_epoch: spe,
    };

    let mut metrics = match paths {
        Some(p) => {
            std::fs::create_dir_all(&p.out_dir)
                .map_err(|e| SphereError::io(format!("creating {}", p.out_dir.display()), e))?;
            let fresh = state.step == 0 || !p.metrics().exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(p.metrics())
                .map_err(|e| SphereError::io(format!("opening {}", p.metrics().display()), e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| SphereError::io("writing metrics", e))?;
            }
            Some(f)
        }
        None => None,
    };

    let mut history = Vec::new();
    while state.step < total_steps {
        let epoch = state.step / spe;
        let batch_index = (state.step % spe) as usize;
        let order = epoch_order(ds.len(), run.train.seed, epoch);
        let idx = &order[batch_index * run.train.batch_size..(batch_index + 1) * run.train.batch_size];
        let mut aug_rng = stream_rng(run.train.seed, Stream::Augment, state.step);
        let batch = augment_batch(&ds.images.select(idx), run.flip_prob, &mut aug_rng);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let x = model.images_to_tensor(&batch)?;
        let report = train_step(model, state, &ctx, &x, &labels, batch_index)?;
        history.push((state.step, report));
        if let Some(f) = metrics.as_mut() {
            write_metrics_row(f, state.step, &report)?;
        }
        if state.step % 100 == 0 {
            log::info!(
                "step {}/{} total {:.4} (recon {:.4}, con {:.4}, lat {:.4})",
                state.step,
                total_steps,
                report.total,
                report.pix_recon,
                report.pix_con,
                report.lat_con
            );
        }
        if let Some(p) = paths {
            let every = run.train.checkpoint_every;
            if every > 0 && state.step % every == 0 && state.step < total_steps {
                training_checkpoint(model, state, run.train.seed)?.save(&p.step_checkpoint(state.step))?;
            }
        }
    }
    let checkpoint = training_checkpoint(model, state, run.train.seed)?;
    if let Some(p) = paths {
        checkpoint.save(&p.final_checkpoint())?;
    }
    Ok(TrainOutcome { checkpoint, history })
}

fn write_metrics_row(f: &mut File, step: u64, r: &LossReport) -> Result<()> {
    writeln!(f, "{step},{},{},{},{}", r.pix_recon, r.pix_con, r.lat_con, r.total)
        .map_err(|e| SphereError::io("writing metrics", e))
}

/// Reads a metrics CSV back into `(step, report)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, LossReport)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| SphereError::Config(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SphereError::Config(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| SphereError::Config(format!("bad metrics row {rec:?}")))
        };
        out.push((
            num(0)? as u64,
            LossReport {
                pix_recon: num(1)?,
                pix_con: num(2)?,
                lat_con: num(3)?,
                total: num(4)?,
            },
        ));
    }
    Ok(out)
}

/// Bitwise fingerprint of parameter values, for before/after comparisons.
pub fn param_fingerprint(params: &ParamStore) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for (name, var) in params.iter() {
        let arr = NamedArray::from_tensor(name.clone(), var.as_tensor())?;
        match arr.data {
            ArrayData::F32(v) => out.extend(v.iter().map(|x| x.to_bits() as u64)),
            ArrayData::F64(v) => out.extend(v.iter().map(|x| x.to_bits())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            warmup_epochs: 2,
            total_epochs: 10,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = cfg();
        let spe = 5;
        assert_eq!(lr_at(0, &c, spe), 0.0);
        assert!((lr_at(1, &c, spe) - 1e-3 / 10.0).abs() < 1e-18);
        assert!((lr_at(10, &c, spe) - 1e-3).abs() < 1e-15);
        assert!((lr_at(50, &c, spe) - 1e-5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..=50 {
            let lr = lr_at(s, &c, spe);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.warmup_epochs = 10;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.min_learning_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kept = cfg_dropout(&labels, 0.0, &mut rng);
        assert!(kept.iter().zip(&labels).all(|(l, &y)| *l == Label::Class(y)));
        assert!(cfg_dropout(&labels, 1.0, &mut rng).iter().all(|l| *l == Label::Null));
        let big: Vec<usize> = vec![0; 100_000];
        let nulls = cfg_dropout(&big, 0.1, &mut rng).iter().filter(|l| **l == Label::Null).count();
        let frac = nulls as f64 / big.len() as f64;
        assert!((frac - 0.1).abs() < 0.005, "{frac}");
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = stream_rng(3, Stream::Noise, 10).random();
        let b: u64 = stream_rng(3, Stream::Noise, 10).random();
        let c: u64 = stream_rng(3, Stream::Noise, 11).random();
        let d: u64 = stream_rng(3, Stream::Dropout, 10).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
