//! `sphere` command line: train, generate, reconstruct, interpolate, edit,
//! eval and latent-viz.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::ImageBatch;
use crate::config::{parse_override, RunConfig};
use crate::data::{load_dataset, prepare_image, save_png, synth_generate, tile_grid, DatasetSpec, LabeledDataset};
use crate::error::{Result, SphereError};
use crate::evaluation::{
    conditional_uniformity, eval_generation, generate_many, interpolation_grid, median, reconstruction_errors,
    write_projection_csv, write_summary, Corner,
};
use crate::geometry::{sample_sphere_uniform, NoisePolicy};
use crate::losses::FeatureExtractor;
use crate::network::{tensor_to_images, Checkpoint, Label, SphereModel};
use crate::sampling::{crossover, manipulate, reconstruct, CfgPosition, EditPlan, SamplerPlan, Stitch};
use crate::training::{resume_from, run_training, TrainPaths, TrainState, TrainingRun};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SPHERE_OUT_DIR";
/// Header of the generation manifest.
pub const MANIFEST_HEADER: [&str; 8] =
    ["filename", "class", "seed", "steps", "cfg", "cfg_position", "per_position_scale", "nfe"];

#[derive(Debug, Parser)]
#[command(name = "sphere", version, about = "Spherical-latent image autoencoder and generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) a model.
    Train(TrainArgs),
    /// Sample images from a checkpoint.
    Generate(GenerateArgs),
    /// Encode and decode images without noise.
    Reconstruct(ReconstructArgs),
    /// Decode a bilinear grid spanning four latent corners.
    Interpolate(InterpolateArgs),
    /// Class manipulation or crossover harmonization of real images.
    Edit(EditArgs),
    /// Fréchet feature distance, uniformity and reconstruction report.
    Eval(EvalArgs),
    /// Export 3-D projections of encoder latents.
    LatentViz(LatentVizArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: $SPHERE_OUT_DIR or ./sphere-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("sphere-out"))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config: toy, toy-fast or tiny.
    #[arg(long)]
    pub preset: Option<String>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub total_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Resume from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CfgPos {
    None,
    Enc,
    Dec,
    Combo,
}

impl From<CfgPos> for CfgPosition {
    fn from(p: CfgPos) -> Self {
        match p {
            CfgPos::None => CfgPosition::None,
            CfgPos::Enc => CfgPosition::Enc,
            CfgPos::Dec => CfgPosition::Dec,
            CfgPos::Combo => CfgPosition::Combo,
        }
    }
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Redraw the noise direction at every refinement step.
    #[arg(long)]
    pub no_share_noise: bool,
    #[arg(long, default_value_t = 1.0)]
    pub cfg: f64,
    #[arg(long, value_enum, default_value_t = CfgPos::None)]
    pub cfg_position: CfgPos,
    /// Truncate the Gaussian prior to `[-a, a]`.
    #[arg(long)]
    pub truncation: Option<f64>,
    /// Fixed noise strength for every refinement step.
    #[arg(long)]
    pub r: Option<f64>,
    /// Run config supplying the noise policy (default policy otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl SamplerArgs {
    pub fn plan(&self, seed: u64) -> SamplerPlan {
        SamplerPlan {
            steps: self.steps,
            gamma: self.gamma,
            share_noise: !self.no_share_noise,
            cfg_scale: self.cfg,
            cfg_position: self.cfg_position.into(),
            truncation: self.truncation,
            r_override: self.r,
            seed,
        }
    }

    pub fn policy(&self) -> Result<NoisePolicy> {
        match &self.config {
            Some(p) => RunConfig::load(p)?.noise_policy(),
            None => Ok(NoisePolicy::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Class id; omit to cycle through all classes (or null if unconditional).
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Folder of `class_name/*.png`; a synthetic set is used otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Images per class for the synthetic set.
    #[arg(long, default_value_t = 32)]
    pub per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
}

impl DataArgs {
    pub fn load(&self, model: &SphereModel) -> Result<LabeledDataset> {
        let c = model.config();
        let mut spec = DatasetSpec::synthetic(c.image_size, c.channels, c.n_classes.max(1), self.per_class);
        if let Some(path) = &self.data {
            spec.source = crate::data::Source::Folder;
            spec.path = Some(path.clone());
            spec.classes.clear();
        }
        load_dataset(&spec, self.data_seed)
    }
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labels of the four corners (tl,tr,bl,br); `null` for no class.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, default_value_t = 5)]
    pub grid_n: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Manipulate,
    Crossover,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Split {
    LeftRight,
    TopBottom,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Source image (PNG).
    #[arg(long)]
    pub input: PathBuf,
    /// Second source image for crossover.
    #[arg(long)]
    pub input_b: Option<PathBuf>,
    #[arg(long)]
    pub target_class: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = Split::LeftRight)]
    pub stitch: Split,
    /// Stitch boundary in pixels (default: half the image).
    #[arg(long)]
    pub at: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct LatentVizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: Common,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SphereError::io(format!("creating {}", dir.display()), e))
}

fn load_model(path: &Path) -> Result<SphereModel> {
    Checkpoint::load(path, None)?.to_model(DType::F32)
}

fn write_batch(batch: &ImageBatch, dir: &Path, prefix: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for i in 0..batch.n {
        let name = format!("{prefix}_{i:04}.png");
        save_png(batch.image(i), batch.height, batch.width, batch.channels, &dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

fn write_grid(batch: &ImageBatch, cols: usize, path: &Path) -> Result<()> {
    let g = tile_grid(batch, cols);
    save_png(&g.data, g.height, g.width, g.channels, path)
}

fn grid_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

fn read_png(path: &Path, model: &SphereModel) -> Result<ImageBatch> {
    let c = model.config();
    let spec = DatasetSpec::synthetic(c.image_size, c.channels, 1, 1);
    let img = image::open(path)?;
    let data = prepare_image(img, &spec);
    Ok(ImageBatch::from_images(c.image_size, c.image_size, c.channels, &[&data]))
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let base = match (&args.config, &args.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::preset("toy")?,
    };
    let mut overrides = args.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(v) = args.total_epochs {
        overrides.push(("total_epochs".into(), v.to_string()));
    }
    if let Some(v) = args.batch_size {
        overrides.push(("batch_size".into(), v.to_string()));
    }
    if let Some(v) = args.learning_rate {
        overrides.push(("learning_rate".into(), format!("{v:e}")));
    }
    overrides.push(("seed".into(), args.common.seed.to_string()));
    let cfg = base.with_overrides(&overrides)?;
    let out = args.common.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| args.common.out_dir());
    create_dir(&out)?;
    let snapshot = out.join("config.toml");
    std::fs::write(&snapshot, cfg.to_toml()).map_err(|e| SphereError::io(format!("writing {}", snapshot.display()), e))?;

    let dataset = load_dataset(&cfg.dataset_spec(), cfg.data_seed)?;
    let model_cfg = cfg.model_config();
    if model_cfg.is_conditional() && dataset.n_classes() != model_cfg.n_classes {
        return Err(SphereError::ConfigMismatch(format!(
            "dataset has {} classes but n_classes = {}",
            dataset.n_classes(),
            model_cfg.n_classes
        )));
    }
    let train = cfg.train_config();
    let (model, mut state) = match &args.resume {
        Some(p) => resume_from(&Checkpoint::load(p, Some(&model_cfg))?, &train, DType::F32)?,
        None => (SphereModel::new(model_cfg, DType::F32, cfg.seed)?, TrainState::new(&train)),
    };
    let policy = cfg.noise_policy()?;
    let weights = cfg.loss_weights();
    let run = TrainingRun {
        dataset: &dataset,
        train: &train,
        policy: &policy,
        weights: &weights,
        flip_prob: cfg.flip_prob,
        extractor_seed: cfg.extractor_seed,
    };
    let paths = TrainPaths { out_dir: out.clone() };
    run_training(&run, &model, &mut state, Some(&paths))?;
    log::info!("wrote {}", paths.final_checkpoint().display());
    Ok(paths.final_checkpoint())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let model = load_model(&args.checkpoint)?;
    let plan = args.sampler.plan(args.common.seed);
    plan.validate()?;
    let policy = args.sampler.policy()?;
    let k = model.config().n_classes;
    let labels: Vec<Label> = match args.class {
        Some(c) if c >= k => return Err(SphereError::InvalidClass { id: c, n_classes: k }),
        Some(c) => vec![Label::Class(c); args.n],
        None => crate::evaluation::balanced_labels(&model, args.n),
    };
    let images = generate_many(&model, &labels, &plan, &policy)?;
    let out = args.common.out_dir();
    create_dir(&out)?;
    let names = write_batch(&images, &out, "sample")?;
    write_grid(&images, grid_cols(images.n), &out.join("grid.png"))?;
    let manifest = out.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| SphereError::Config(e.to_string()))?;
    let err = |e: csv::Error| SphereError::Config(e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(err)?;
    for (name, label) in names.iter().zip(&labels) {
        let class = match label {
            Label::Class(c) => c.to_string(),
            Label::Null => "null".into(),
        };
        w.write_record([
            name.clone(),
            class,
            plan.seed.to_string(),
            plan.steps.to_string(),
            plan.cfg_scale.to_string(),
            plan.cfg_position.to_string(),
            format!("{:.6}", plan.per_position_scale()),
            plan.nfe().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| SphereError::io("writing manifest", e))?;
    Ok(out)
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<PathBuf> {
    let model = load_model(&args.checkpoint)?;
    let ds = args.data.load(&model)?;
    let x = model.images_to_tensor(&ds.images)?;
    let rec = tensor_to_images(&reconstruct(&model, &x)?)?;
    let out = args.common.out_dir();
    create_dir(&out)?;
    write_batch(&rec, &out, "recon")?;
    let mut pairs = ImageBatch::zeros(0, rec.height, rec.width, rec.channels);
    for i in 0..rec.n {
        pairs = ImageBatch::concat(&[&pairs, &ds.images.select(&[i]), &rec.select(&[i])]);
    }
    write_grid(&pairs, 2 * grid_cols(rec.n), &out.join("grid.png"))?;
    let errs = reconstruction_errors(&model, &ds.images)?;
    write_summary(
        &out.join("summary.txt"),
        &[
            ("images".into(), rec.n.to_string()),
            ("median_l1".into(), median(&errs).to_string()),
        ],
    )?;
    Ok(out)
}

fn parse_label(s: &str, n_classes: usize) -> Result<Label> {
    if s == "null" {
        return Ok(Label::Null);
    }
    let id: usize = s
        .parse()
        .map_err(|_| SphereError::Config(format!("label {s:?} is neither a class id nor null")))?;
    if id >= n_classes {
        return Err(SphereError::InvalidClass { id, n_classes });
    }
    Ok(Label::Class(id))
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> Result<PathBuf> {
    let model = load_model(&args.checkpoint)?;
    let k = model.config().n_classes;
    let labels: Vec<Label> = match &args.classes {
        Some(list) if list.len() != 4 => {
            return Err(SphereError::Config(format!("--classes needs 4 labels, got {}", list.len())))
        }
        Some(list) => list.iter().map(|s| parse_label(s, k)).collect::<Result<_>>()?,
        None => (0..4).map(|i| if k == 0 { Label::Null } else { Label::Class(i % k) }).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed);
    let shape = model.config().latent_shape();
    let corners: Vec<Corner> = labels
        .iter()
        .map(|&label| Corner {
            latent: sample_sphere_uniform(shape, &mut rng, args.sampler.truncation),
            label,
        })
        .collect();
    let corners: [Corner; 4] = corners.try_into().expect("four corners");
    let plan = args.sampler.plan(args.common.seed);
    let grid = interpolation_grid(&model, &corners, args.grid_n, &plan, &args.sampler.policy()?)?;
    let out = args.common.out_dir();
    create_dir(&out)?;
    write_grid(&grid, args.grid_n, &out.join("interpolation.png"))?;
    Ok(out)
}

pub fn cmd_edit(args: &EditArgs) -> Result<PathBuf> {
    let model = load_model(&args.checkpoint)?;
    let policy = match &args.config {
        Some(p) => RunConfig::load(p)?.noise_policy()?,
        None => NoisePolicy::default(),
    };
    let a = read_png(&args.input, &model)?;
    let xa = model.images_to_tensor(&a)?;
    let size = model.config().image_size;
    let (plan, result, composite): (EditPlan, Tensor, Option<Tensor>) = match args.mode {
        Mode::Manipulate => {
            let target = args
                .target_class
                .ok_or_else(|| SphereError::Config("--target-class is required for manipulate".into()))?;
            let mut plan = EditPlan::manipulate(target, args.steps.unwrap_or(1));
            apply_edit_overrides(&mut plan, args);
            let out = manipulate(&model, &xa, &plan, &policy)?;
            (plan, out, None)
        }
        Mode::Crossover => {
            let b_path = args
                .input_b
                .as_ref()
                .ok_or_else(|| SphereError::Config("--input-b is required for crossover".into()))?;
            let xb = model.images_to_tensor(&read_png(b_path, &model)?)?;
            let at = args.at.unwrap_or(size / 2);
            let stitch = match args.stitch {
                Split::LeftRight => Stitch::LeftRight { at },
                Split::TopBottom => Stitch::TopBottom { at },
            };
            let mut plan = EditPlan::crossover(stitch);
            plan.target_class = args.target_class;
            if let Some(s) = args.steps {
                plan.steps = s;
            }
            apply_edit_overrides(&mut plan, args);
            let composite = crate::sampling::stitch(&xa, &xb, stitch)?;
            let out = crossover(&model, &xa, &xb, &plan, &policy)?;
            (plan, out, Some(composite))
        }
    };
    let out = args.common.out_dir();
    create_dir(&out)?;
    let img = tensor_to_images(&result)?;
    save_png(img.image(0), img.height, img.width, img.channels, &out.join("edited.png"))?;
    if let Some(c) = composite {
        let c = tensor_to_images(&c)?;
        save_png(c.image(0), c.height, c.width, c.channels, &out.join("composite.png"))?;
    }
    write_summary(
        &out.join("edit.txt"),
        &[
            ("mode".into(), format!("{:?}", plan.mode).to_lowercase()),
            ("steps".into(), plan.steps.to_string()),
            ("r".into(), plan.r.to_string()),
            ("gamma".into(), plan.gamma.to_string()),
            ("seed".into(), plan.seed.to_string()),
        ],
    )?;
    Ok(out)
}

fn apply_edit_overrides(plan: &mut EditPlan, args: &EditArgs) {
    if let Some(r) = args.r {
        plan.r = r;
    }
    if let Some(g) = args.gamma {
        plan.gamma = g;
    }
    plan.seed = args.common.seed;
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let model = load_model(&args.checkpoint)?;
    let ds = args.data.load(&model)?;
    let plan = args.sampler.plan(args.common.seed);
    let policy = args.sampler.policy()?;
    let fx = FeatureExtractor::new(model.config().channels, args.extractor_seed, DType::F32)?;
    let gen = eval_generation(&model, &plan, &policy, &ds, &fx, args.n_samples)?;
    let uni = conditional_uniformity(&model, &ds, args.common.seed)?;
    let recon = median(&reconstruction_errors(&model, &ds.images)?);
    let out = args.common.out_dir();
    create_dir(&out)?;
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| SphereError::Config(e.to_string()))?;
    let err = |e: csv::Error| SphereError::Config(e.to_string());
    w.write_record(["metric", "class", "value"]).map_err(err)?;
    w.write_record(["frechet_distance", "all", &gen.distance.to_string()]).map_err(err)?;
    w.write_record(["noise_baseline", "all", &gen.noise_baseline.to_string()]).map_err(err)?;
    for (c, d) in &gen.per_class {
        w.write_record(["frechet_distance", &ds.class_names[*c], &d.to_string()]).map_err(err)?;
    }
    for (c, d) in &uni.per_class {
        w.write_record(["swd_to_uniform", &ds.class_names[*c], &d.to_string()]).map_err(err)?;
    }
    w.write_record(["swd_to_uniform", "pooled", &uni.pooled.to_string()]).map_err(err)?;
    w.write_record(["median_recon_l1", "all", &recon.to_string()]).map_err(err)?;
    w.flush().map_err(|e| SphereError::io("writing eval.csv", e))?;
    write_summary(
        &out.join("summary.txt"),
        &[
            ("note".into(), "features come from a frozen seeded extractor; values are not FID".into()),
            ("n_samples".into(), gen.n_samples.to_string()),
            ("frechet_distance".into(), gen.distance.to_string()),
            ("noise_baseline".into(), gen.noise_baseline.to_string()),
            ("swd_pooled".into(), uni.pooled.to_string()),
            ("median_recon_l1".into(), recon.to_string()),
        ],
    )?;
    Ok(out)
}

pub fn cmd_latent_viz(args: &LatentVizArgs) -> Result<PathBuf> {
    let model = load_model(&args.checkpoint)?;
    let ds = args.data.load(&model)?;
    let uni = conditional_uniformity(&model, &ds, args.common.seed)?;
    let out = args.common.out_dir();
    create_dir(&out)?;
    write_projection_csv(&out.join("latents_3d.csv"), &uni.coords, &ds.class_names)?;
    Ok(out)
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::LatentViz(a) => cmd_latent_viz(a),
    }
}

/// Synthetic dataset matching a model's image shape, for quick checks.
pub fn default_dataset(model: &SphereModel, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let c = model.config();
    synth_generate(&DatasetSpec::synthetic(c.image_size, c.channels, c.n_classes.max(1), per_class), seed)
}
