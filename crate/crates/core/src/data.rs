//! Datasets: a seeded synthetic shape renderer, a `class_name/*.png` folder
//! loader, flip augmentation and PNG output.

use std::path::{Path, PathBuf};

use image::{imageops::FilterType, DynamicImage, GrayImage, RgbImage};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{flip_horizontal, ImageBatch};
use crate::error::{Result, SphereError};
use crate::training::{stream_rng, Stream};

/// Shape names the synthetic renderer knows, in default class order.
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub image_size: usize,
    pub channels: usize,
    /// Class names. For folders an empty list means "every subdirectory".
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default = "default_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    #[serde(default = "default_true")]
    pub center_crop: bool,
}

fn default_per_class() -> usize {
    64
}
fn default_flip() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

impl DatasetSpec {
    pub fn synthetic(image_size: usize, channels: usize, n_classes: usize, n_per_class: usize) -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            image_size,
            channels,
            classes: SHAPES.iter().take(n_classes).map(|s| s.to_string()).collect(),
            n_per_class,
            flip_prob: 0.5,
            center_crop: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(SphereError::Config(format!(
                "image_size must be > 0 and channels 1 or 3, got {} / {}",
                self.image_size, self.channels
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(SphereError::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Images with integer labels and the class names they index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_subset(&self, class: usize) -> ImageBatch {
        self.images.select(&self.indices_of(class))
    }
}

/// Loads whatever `spec.source` names.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    match spec.source {
        Source::Synthetic => synth_generate(spec, seed),
        Source::Folder => {
            let path = spec
                .path
                .as_ref()
                .ok_or_else(|| SphereError::Config("folder dataset needs a path".into()))?;
            load_folder(path, spec)
        }
    }
}

fn inside(shape: &str, x: f64, y: f64) -> bool {
    // (x, y) relative to the shape centre, in units of its radius.
    match shape {
        "circle" => x * x + y * y <= 1.0,
        "square" => x.abs() <= 0.8 && y.abs() <= 0.8,
        "triangle" => y <= 0.75 && y >= -1.0 + 1.75 * x.abs() / 0.95,
        "diamond" => x.abs() + y.abs() <= 1.0,
        "cross" => (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0),
        "ring" => {
            let r2 = x * x + y * y;
            (0.36..=1.0).contains(&r2)
        }
        _ => false,
    }
}

/// Renders one antialiased shape on a flat background.
pub fn render_shape<R: Rng + ?Sized>(shape: &str, size: usize, channels: usize, rng: &mut R) -> Vec<f32> {
    const SS: usize = 4;
    let bg: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..-0.3)).collect();
    let fg: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
    let s = size as f64;
    let radius = rng.random_range(0.22..0.34) * s;
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    let (bg, fg) = if channels == 1 {
        let l = |c: &[f64]| vec![c.iter().sum::<f64>() / 3.0];
        (l(&bg), l(&fg))
    } else {
        (bg, fg)
    };
    let mut out = Vec::with_capacity(size * size * channels);
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = (px as f64 + (sx as f64 + 0.5) / SS as f64 - cx) / radius;
                    let y = (py as f64 + (sy as f64 + 0.5) / SS as f64 - cy) / radius;
                    if inside(shape, x, y) {
                        hits += 1;
                    }
                }
            }
            let a = hits as f64 / (SS * SS) as f64;
            for c in 0..channels {
                out.push((bg[c] * (1.0 - a) + fg[c] * a) as f32);
            }
        }
    }
    out
}

/// Balanced synthetic dataset, class-major, byte-identical for a fixed seed.
pub fn synth_generate(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.n_per_class == 0 {
        return Err(SphereError::Config("n_per_class must be >= 1".into()));
    }
    let classes = if spec.classes.is_empty() {
        SHAPES[..3].iter().map(|s| s.to_string()).collect()
    } else {
        spec.classes.clone()
    };
    for c in &classes {
        if !SHAPES.contains(&c.as_str()) {
            return Err(SphereError::Config(format!("unknown synthetic shape {c:?}; known: {SHAPES:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let mut images = ImageBatch::zeros(0, size, size, spec.channels);
    let mut labels = Vec::new();
    for (label, name) in classes.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            images.data.extend(render_shape(name, size, spec.channels, &mut rng));
            images.n += 1;
            labels.push(label);
        }
    }
    Ok(LabeledDataset {
        images,
        labels,
        class_names: classes,
    })
}

/// Decodes, optionally centre-crops to a square, resizes and scales to [-1, 1].
pub fn prepare_image(img: DynamicImage, spec: &DatasetSpec) -> Vec<f32> {
    let img = if spec.center_crop {
        let (w, h) = (img.width(), img.height());
        let side = w.min(h);
        img.crop_imm((w - side) / 2, (h - side) / 2, side, side)
    } else {
        img
    };
    let n = spec.image_size as u32;
    let img = img.resize_exact(n, n, FilterType::Triangle);
    let raw: Vec<u8> = if spec.channels == 1 {
        img.to_luma8().into_raw()
    } else {
        img.to_rgb8().into_raw()
    };
    raw.into_iter().map(|p| p as f32 / 127.5 - 1.0).collect()
}

/// Loads `root/<class_name>/*.png`. Unreadable files are skipped with a warning.
pub fn load_folder(root: &Path, spec: &DatasetSpec) -> Result<LabeledDataset> {
    let classes = if spec.classes.is_empty() {
        let mut dirs = Vec::new();
        let entries = std::fs::read_dir(root).map_err(|e| SphereError::io(format!("reading {}", root.display()), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| SphereError::io(format!("reading {}", root.display()), e))?;
            if entry.path().is_dir() {
                dirs.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        dirs.sort();
        dirs
    } else {
        spec.classes.clone()
    };
    let size = spec.image_size;
    let mut images = ImageBatch::zeros(0, size, size, spec.channels);
    let mut labels = Vec::new();
    for (label, name) in classes.iter().enumerate() {
        let dir = root.join(name);
        let entries = std::fs::read_dir(&dir).map_err(|e| SphereError::io(format!("reading {}", dir.display()), e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            match image::open(&f) {
                Ok(img) => {
                    images.data.extend(prepare_image(img, spec));
                    images.n += 1;
                    labels.push(label);
                }
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        }
    }
    if labels.is_empty() {
        return Err(SphereError::EmptyDataset(format!("no readable PNGs under {}", root.display())));
    }
    Ok(LabeledDataset {
        images,
        labels,
        class_names: classes,
    })
}

/// Mirrors the image with probability `flip_prob`; returns whether it flipped.
pub fn augment<R: Rng + ?Sized>(
    img: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    flip_prob: f64,
    rng: &mut R,
) -> (Vec<f32>, bool) {
    if flip_prob > 0.0 && rng.random::<f64>() < flip_prob {
        (flip_horizontal(img, height, width, channels), true)
    } else {
        (img.to_vec(), false)
    }
}

pub fn augment_batch<R: Rng + ?Sized>(batch: &ImageBatch, flip_prob: f64, rng: &mut R) -> ImageBatch {
    let mut out = batch.clone();
    for i in 0..batch.n {
        let (img, _) = augment(batch.image(i), batch.height, batch.width, batch.channels, flip_prob, rng);
        out.image_mut(i).copy_from_slice(&img);
    }
    out
}

/// Sample order for one epoch; a permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
    order
}

fn to_u8(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes one `(h, w, c)` image in [-1, 1] as an 8-bit PNG.
pub fn save_png(img: &[f32], height: usize, width: usize, channels: usize, path: &Path) -> Result<()> {
    let raw: Vec<u8> = img.iter().map(|&x| to_u8(x)).collect();
    let (w, h) = (width as u32, height as u32);
    let res = match channels {
        1 => GrayImage::from_raw(w, h, raw).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w, h, raw).map(|i| i.save(path)),
        c => return Err(SphereError::Config(format!("cannot write {c}-channel PNG"))),
    };
    match res {
        Some(r) => Ok(r?),
        None => Err(SphereError::shape(height * width * channels, img.len())),
    }
}

/// Tiles a batch row-major into one image with `cols` columns and a 1px gap.
pub fn tile_grid(batch: &ImageBatch, cols: usize) -> ImageBatch {
    let cols = cols.max(1).min(batch.n.max(1));
    let rows = batch.n.div_ceil(cols).max(1);
    let (h, w, c) = (batch.height, batch.width, batch.channels);
    let gh = rows * (h + 1) - 1;
    let gw = cols * (w + 1) - 1;
    let mut out = ImageBatch::zeros(1, gh, gw, c);
    out.data.iter_mut().for_each(|x| *x = 1.0);
    for i in 0..batch.n {
        let (r, col) = (i / cols, i % cols);
        let img = batch.image(i);
        for y in 0..h {
            let dst = ((r * (h + 1) + y) * gw + col * (w + 1)) * c;
            out.data[dst..dst + w * c].copy_from_slice(&img[y * w * c..(y + 1) * w * c]);
        }
    }
    out
}

/// Writes the dataset as `root/<class_name>/<index>.png`.
pub fn export_folder(ds: &LabeledDataset, root: &Path) -> Result<()> {
    for name in &ds.class_names {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| SphereError::io(format!("creating {}", dir.display()), e))?;
    }
    let b = &ds.images;
    for i in 0..ds.len() {
        let path = root.join(&ds.class_names[ds.labels[i]]).join(format!("{i:05}.png"));
        save_png(b.image(i), b.height, b.width, b.channels, &path)?;
    }
    Ok(())
}
