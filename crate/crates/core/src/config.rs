//! Flat run configuration in TOML.
//!
//! Key names follow the usual hyperparameter-table rows (`batch_size`,
//! `min_lr`, `angle_jitter_range`, `mlp_mixer_depth`, …). Unknown keys are
//! rejected; `key=value` overrides are applied on top of the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Source, SHAPES};
use crate::error::{Result, SphereError};
use crate::geometry::NoisePolicy;
use crate::losses::LossWeights;
use crate::network::ModelConfig;
use crate::sampling::{CfgPosition, SamplerPlan};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JitterKind {
    /// Uniform in angle, with an optional high-angle mix band.
    Angle,
    /// Uniform in `σ` up to `sigma_max`.
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // data
    #[serde(default = "d_source")]
    pub dataset_source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    pub image_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default = "d_per_class")]
    pub n_per_class: usize,
    #[serde(default = "d_half")]
    pub flip_prob: f64,
    #[serde(default = "d_true")]
    pub center_crop: bool,
    #[serde(default)]
    pub data_seed: u64,

    // optimisation
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "d_cosine")]
    pub lr_decay_schedule: String,
    pub min_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_adamw")]
    pub optimizer: String,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_one")]
    pub grad_clip: f64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,

    // model
    pub patch_size: usize,
    pub num_transformer_blocks: usize,
    pub num_attention_heads: usize,
    pub transformer_hidden_size: usize,
    pub mlp_mixer_depth: usize,
    pub latent_channels: usize,
    #[serde(default = "d_true")]
    pub class_condition: bool,
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    #[serde(default = "d_null_prob")]
    pub null_class_prob: f64,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,

    // noise
    #[serde(default = "d_jitter")]
    pub jitter_mode: JitterKind,
    #[serde(default = "d_jitter_range")]
    pub angle_jitter_range: [f64; 2],
    #[serde(default = "d_mix_range", skip_serializing_if = "Option::is_none")]
    pub angle_mix_range: Option<[f64; 2]>,
    #[serde(default = "d_mix_prob")]
    pub angle_mix_probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,

    // losses
    #[serde(default = "d_one")]
    pub pix_recon_smooth_l1_weight: f64,
    #[serde(default = "d_one")]
    pub pix_recon_perceptual_weight: f64,
    #[serde(default = "d_half")]
    pub pix_con_smooth_l1_weight: f64,
    #[serde(default = "d_half")]
    pub pix_con_perceptual_weight: f64,
    #[serde(default = "d_lat")]
    pub lat_con_weight: f64,
    #[serde(default)]
    pub extractor_seed: u64,

    // sampler
    #[serde(default = "d_steps")]
    pub sample_steps: usize,
    #[serde(default)]
    pub sample_gamma: f64,
    #[serde(default = "d_true")]
    pub share_noise: bool,
    #[serde(default = "d_one")]
    pub cfg_scale: f64,
    #[serde(default = "d_cfg_pos")]
    pub cfg_position: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,

    // paths
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn d_source() -> Source {
    Source::Synthetic
}
fn d_channels() -> usize {
    3
}
fn d_per_class() -> usize {
    64
}
fn d_half() -> f64 {
    0.5
}
fn d_true() -> bool {
    true
}
fn d_cosine() -> String {
    "cosine".into()
}
fn d_adamw() -> String {
    "adamw".into()
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_one() -> f64 {
    1.0
}
fn d_classes() -> usize {
    3
}
fn d_null_prob() -> f64 {
    0.1
}
fn d_mlp_ratio() -> usize {
    4
}
fn d_jitter() -> JitterKind {
    JitterKind::Angle
}
fn d_jitter_range() -> [f64; 2] {
    [0.0, 80.0]
}
fn d_mix_range() -> Option<[f64; 2]> {
    Some([80.0, 85.0])
}
fn d_mix_prob() -> f64 {
    0.1
}
fn d_lat() -> f64 {
    0.1
}
fn d_steps() -> usize {
    1
}
fn d_cfg_pos() -> String {
    "none".into()
}

impl RunConfig {
    /// Builds a config around a model preset with default everything else.
    pub fn from_model(model: &ModelConfig) -> Self {
        let mut c: RunConfig = toml::from_str(
            "image_size = 1\nbatch_size = 16\nlearning_rate = 1e-3\nmin_lr = 1e-5\n\
             warmup_epochs = 2\ntotal_epochs = 40\npatch_size = 1\nnum_transformer_blocks = 1\n\
             num_attention_heads = 1\ntransformer_hidden_size = 4\nmlp_mixer_depth = 1\nlatent_channels = 1\n",
        )
        .expect("built-in defaults parse");
        c.image_size = model.image_size;
        c.channels = model.channels;
        c.patch_size = model.patch_size;
        c.num_transformer_blocks = model.n_blocks;
        c.num_attention_heads = model.n_heads;
        c.transformer_hidden_size = model.hidden_size;
        c.mlp_mixer_depth = model.mixer_depth;
        c.latent_channels = model.latent_channels;
        c.class_condition = model.n_classes > 0;
        c.n_classes = model.n_classes.max(1);
        c.null_class_prob = model.cfg_null_drop_prob;
        c.mlp_ratio = model.mlp_ratio;
        c
    }

    /// Named presets: `toy`, `toy-fast`, `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::from_model(&ModelConfig::toy())),
            "toy-fast" => Ok(Self::from_model(&ModelConfig::toy_fast())),
            "tiny" => {
                let mut c = Self::from_model(&ModelConfig::tiny());
                c.batch_size = 4;
                c.total_epochs = 4;
                c.warmup_epochs = 1;
                c.n_per_class = 4;
                Ok(c)
            }
            other => Err(SphereError::Config(format!("unknown preset {other:?} (toy|toy-fast|tiny)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| SphereError::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SphereError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            SphereError::Config(m) => SphereError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are parsed as TOML, falling back
    /// to a bare string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        for (key, raw) in overrides {
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("key present"),
                Err(_) => toml::Value::String(raw.clone()),
            };
            table.insert(key.clone(), value);
        }
        let text = toml::to_string(&table).expect("table serializes");
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_decay_schedule != "cosine" {
            return Err(SphereError::Config(format!(
                "lr_decay_schedule: only \"cosine\" is supported, got {:?}",
                self.lr_decay_schedule
            )));
        }
        if self.optimizer != "adamw" {
            return Err(SphereError::Config(format!(
                "optimizer: only \"adamw\" is supported, got {:?}",
                self.optimizer
            )));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.noise_policy()?;
        self.loss_weights().validate()?;
        self.sampler_plan()?.validate()?;
        self.dataset_spec().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            hidden_size: self.transformer_hidden_size,
            n_blocks: self.num_transformer_blocks,
            n_heads: self.num_attention_heads,
            mixer_depth: self.mlp_mixer_depth,
            latent_channels: self.latent_channels,
            n_classes: if self.class_condition { self.n_classes } else { 0 },
            cfg_null_drop_prob: self.null_class_prob,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            min_learning_rate: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn noise_policy(&self) -> Result<NoisePolicy> {
        match self.jitter_mode {
            JitterKind::Angle => NoisePolicy::angle_uniform(
                (self.angle_jitter_range[0], self.angle_jitter_range[1]),
                self.angle_mix_range.map(|[a, b]| (a, b)),
                self.angle_mix_probability,
            ),
            JitterKind::Sigma => NoisePolicy::sigma_uniform(
                self.sigma_max
                    .ok_or_else(|| SphereError::Config("sigma_max is required when jitter_mode = \"sigma\"".into()))?,
            ),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            pix_recon_l1: self.pix_recon_smooth_l1_weight,
            pix_recon_perceptual: self.pix_recon_perceptual_weight,
            pix_con_l1: self.pix_con_smooth_l1_weight,
            pix_con_perceptual: self.pix_con_perceptual_weight,
            lat_con: self.lat_con_weight,
        }
    }

    pub fn sampler_plan(&self) -> Result<SamplerPlan> {
        Ok(SamplerPlan {
            steps: self.sample_steps,
            gamma: self.sample_gamma,
            share_noise: self.share_noise,
            cfg_scale: self.cfg_scale,
            cfg_position: self.cfg_position.parse::<CfgPosition>()?,
            truncation: self.truncation,
            r_override: None,
            seed: self.seed,
        })
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let classes = if self.classes.is_empty() && self.dataset_source == Source::Synthetic {
            SHAPES.iter().take(self.n_classes.min(SHAPES.len())).map(|s| s.to_string()).collect()
        } else {
            self.classes.clone()
        };
        DatasetSpec {
            source: self.dataset_source,
            path: self.dataset_path.clone(),
            image_size: self.image_size,
            channels: self.channels,
            classes,
            n_per_class: self.n_per_class,
            flip_prob: self.flip_prob,
            center_crop: self.center_crop,
        }
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| SphereError::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
