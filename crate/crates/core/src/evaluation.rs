//! Desk-scale diagnostics: Fréchet distance over frozen extractor features,
//! per-class sphere uniformity, interpolation grids and a nearest-neighbour
//! memorization check.
//!
//! The Fréchet distance here uses the seeded random extractor from
//! [`crate::losses`], so its values are only comparable with each other.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{flip_horizontal, ImageBatch};
use crate::data::LabeledDataset;
use crate::error::{Result, SphereError};
use crate::geometry::{bilerp_latents, project_to_3d, sliced_wasserstein_to_uniform, NoisePolicy, SphereVector};
use crate::losses::FeatureExtractor;
use crate::network::{spherify_batch, tensor_to_images, Condition, Label, SphereModel};
use crate::sampling::{generate, generate_from, reconstruct, SamplerPlan};

/// Projections used by the uniformity measurement.
pub const SWD_PROJECTIONS: usize = 64;
/// Seed of the shared 3-D projection used for latent plots.
pub const PROJECTION_SEED: u64 = 0x5eed_3d;
/// Images per forward pass during evaluation.
const CHUNK: usize = 32;

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Two-pass estimate from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(SphereError::EmptyDataset("no feature rows".into()));
        };
        let dim = first.len();
        let n = rows.len();
        let mut mean = DVector::zeros(dim);
        for r in rows {
            if r.len() != dim {
                return Err(SphereError::shape(dim, r.len()));
            }
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of the pooled extractor features of an image batch.
    pub fn from_images(fx: &FeatureExtractor, images: &ImageBatch) -> Result<Self> {
        Self::from_rows(&pooled_features(fx, images)?)
    }
}

/// Pooled extractor features, one row per image.
pub fn pooled_features(fx: &FeatureExtractor, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.n);
    let dev = candle_core::Device::Cpu;
    for start in (0..images.n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(images.n)).collect();
        let part = images.select(&idx);
        let x = Tensor::from_slice(&part.data, (part.n, part.height, part.width, part.channels), &dev)?
            .to_dtype(DType::F32)?;
        let f = fx.pooled(&x)?.to_dtype(DType::F64)?;
        rows.extend(f.to_vec2::<f64>()?);
    }
    Ok(rows)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^{1/2})`, with the trace term computed
/// as `tr (Σa^{1/2} Σb Σa^{1/2})^{1/2}`.
pub fn frechet_feature_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(SphereError::shape(a.dim(), b.dim()));
    }
    let diff = &a.mean - &b.mean;
    let sa = sym_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|x| x.max(0.0).sqrt())
        .sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Uniform noise images in `[-1, 1]`.
pub fn noise_images(n: usize, height: usize, width: usize, channels: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ImageBatch::zeros(n, height, width, channels);
    b.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0f32..=1.0));
    b
}

/// Balanced labels `0, 1, …, k−1, 0, …` (all null for unconditional models).
pub fn balanced_labels(model: &SphereModel, n: usize) -> Vec<Label> {
    let k = model.config().n_classes;
    (0..n)
        .map(|i| if k == 0 { Label::Null } else { Label::Class(i % k) })
        .collect()
}

/// Generates `labels.len()` images in chunks; chunk `i` uses seed `plan.seed + i`.
pub fn generate_many(model: &SphereModel, labels: &[Label], plan: &SamplerPlan, policy: &NoisePolicy) -> Result<ImageBatch> {
    let mut parts = Vec::new();
    for (i, chunk) in labels.chunks(CHUNK).enumerate() {
        let p = SamplerPlan {
            seed: plan.seed.wrapping_add(i as u64),
            ..plan.clone()
        };
        parts.push(tensor_to_images(&generate(model, chunk, &p, policy)?.images)?);
    }
    Ok(ImageBatch::concat(&parts.iter().collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub distance: f64,
    pub noise_baseline: f64,
    /// `(class, distance to that class's reference images)`.
    pub per_class: Vec<(usize, f64)>,
    pub n_samples: usize,
}

/// Generates `n_samples` class-balanced images and compares their feature
/// statistics with `reference`, alongside a uniform-noise baseline.
pub fn eval_generation(
    model: &SphereModel,
    plan: &SamplerPlan,
    policy: &NoisePolicy,
    reference: &LabeledDataset,
    fx: &FeatureExtractor,
    n_samples: usize,
) -> Result<GenerationReport> {
    let labels = balanced_labels(model, n_samples);
    let images = generate_many(model, &labels, plan, policy)?;
    let gen_rows = pooled_features(fx, &images)?;
    let ref_rows = pooled_features(fx, &reference.images)?;
    let ref_stats = FeatureStats::from_rows(&ref_rows)?;
    let distance = frechet_feature_distance(&FeatureStats::from_rows(&gen_rows)?, &ref_stats)?;
    let noise = noise_images(n_samples, images.height, images.width, images.channels, plan.seed ^ 0x0153);
    let noise_baseline = frechet_feature_distance(&FeatureStats::from_images(fx, &noise)?, &ref_stats)?;

    let mut per_class = Vec::new();
    if model.config().is_conditional() {
        for c in 0..model.config().n_classes.min(reference.n_classes()) {
            let g: Vec<Vec<f64>> = labels
                .iter()
                .zip(&gen_rows)
                .filter(|(l, _)| **l == Label::Class(c))
                .map(|(_, r)| r.clone())
                .collect();
            let r: Vec<Vec<f64>> = reference.indices_of(c).iter().map(|&i| ref_rows[i].clone()).collect();
            if g.len() < 2 || r.len() < 2 {
                continue;
            }
            per_class.push((c, frechet_feature_distance(&FeatureStats::from_rows(&g)?, &FeatureStats::from_rows(&r)?)?));
        }
    }
    Ok(GenerationReport {
        distance,
        noise_baseline,
        per_class,
        n_samples,
    })
}

/// Sphere latents `spherify(E(x, y))`, encoded in chunks.
pub fn encode_latents(model: &SphereModel, images: &ImageBatch, labels: &[Label]) -> Result<Vec<SphereVector>> {
    let shape = model.config().latent_shape();
    let mut out = Vec::with_capacity(images.n);
    for start in (0..images.n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(images.n)).collect();
        let x = model.images_to_tensor(&images.select(&idx))?;
        let cond = Condition::labels(&labels[start..start + idx.len()]);
        let v = spherify_batch(&model.encode(&x, &cond)?)?.to_dtype(DType::F64)?;
        for row in v.to_vec2::<f64>()? {
            out.push(crate::geometry::spherify(&row, shape)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformityReport {
    /// `(class, SWD to uniform)`; classes with fewer than two images are absent.
    pub per_class: Vec<(usize, f64)>,
    pub pooled: f64,
    /// `(class, unit 3-D projection)` for every encoded image.
    pub coords: Vec<(usize, [f64; 3])>,
}

/// Encodes every image under its own class and measures how uniformly each
/// class alone covers the sphere.
pub fn conditional_uniformity(model: &SphereModel, dataset: &LabeledDataset, seed: u64) -> Result<UniformityReport> {
    let labels: Vec<Label> = dataset
        .labels
        .iter()
        .map(|&y| if model.config().is_conditional() { Label::Class(y) } else { Label::Null })
        .collect();
    let latents = encode_latents(model, &dataset.images, &labels)?;
    let mut per_class = Vec::new();
    for c in 0..dataset.n_classes() {
        let idx = dataset.indices_of(c);
        if idx.len() < 2 {
            log::warn!("class {c} has {} latents; skipping uniformity", idx.len());
            continue;
        }
        let set: Vec<SphereVector> = idx.iter().map(|&i| latents[i].clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
        per_class.push((c, sliced_wasserstein_to_uniform(&set, SWD_PROJECTIONS, &mut rng)?));
    }
    let pooled = if per_class.len() == 1 {
        per_class[0].1
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9001);
        sliced_wasserstein_to_uniform(&latents, SWD_PROJECTIONS, &mut rng)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let points = project_to_3d(&latents, &mut rng)?;
    let coords = dataset.labels.iter().copied().zip(points).collect();
    Ok(UniformityReport {
        per_class,
        pooled,
        coords,
    })
}

/// Writes `class,x,y,z` rows.
pub fn write_projection_csv(path: &Path, coords: &[(usize, [f64; 3])], class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SphereError::Config(e.to_string()))?;
    let err = |e: csv::Error| SphereError::Config(e.to_string());
    w.write_record(["class", "x", "y", "z"]).map_err(err)?;
    for (c, p) in coords {
        let name = class_names.get(*c).cloned().unwrap_or_else(|| c.to_string());
        w.write_record([name, p[0].to_string(), p[1].to_string(), p[2].to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| SphereError::io(format!("writing {}", path.display()), e))
}

/// One corner of an interpolation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Corner {
    pub latent: SphereVector,
    pub label: Label,
}

/// `grid_n × grid_n` decodes spanning four corners `[tl, tr, bl, br]`:
/// latents are bilinearly mixed and re-spherified, class embeddings mixed
/// with the same weights. Each cell runs the sampler plan from its latent.
pub fn interpolation_grid(
    model: &SphereModel,
    corners: &[Corner; 4],
    grid_n: usize,
    plan: &SamplerPlan,
    policy: &NoisePolicy,
) -> Result<ImageBatch> {
    if grid_n < 2 {
        return Err(SphereError::Config(format!("grid size must be >= 2, got {grid_n}")));
    }
    let mut latents = Vec::new();
    let mut rows = Vec::new();
    for i in 0..grid_n {
        let v = i as f64 / (grid_n - 1) as f64;
        for j in 0..grid_n {
            let u = j as f64 / (grid_n - 1) as f64;
            let lat = bilerp_latents([&corners[0].latent, &corners[1].latent, &corners[2].latent, &corners[3].latent], u, v)?;
            latents.extend_from_slice(lat.values());
            let w = [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v];
            let mut row: Vec<(Label, f64)> = Vec::new();
            for (c, wc) in corners.iter().zip(w) {
                match row.iter_mut().find(|(l, _)| *l == c.label) {
                    Some(entry) => entry.1 += wc,
                    None => row.push((c.label, wc)),
                }
            }
            rows.push(row);
        }
    }
    let n = grid_n * grid_n;
    let len = model.config().latent_len();
    let v0 = Tensor::from_vec(latents, (n, len), model.params().device())?.to_dtype(model.dtype())?;
    let cond = Condition::from_rows(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    // The cell latent doubles as the shared refinement direction.
    let out = generate_from(model, &v0, &v0, &cond, plan, policy, &mut rng)?;
    tensor_to_images(&out.images)
}

/// Per-image mean absolute reconstruction error on the noiseless path.
pub fn reconstruction_errors(model: &SphereModel, images: &ImageBatch) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.n);
    for start in (0..images.n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(images.n)).collect();
        let part = images.select(&idx);
        let rec = tensor_to_images(&reconstruct(model, &model.images_to_tensor(&part)?)?)?;
        for i in 0..part.n {
            out.push(crate::batch::mean_abs_diff(part.image(i), rec.image(i)));
        }
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Nearest training image for one generated image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestMatch {
    pub index: usize,
    /// Root-mean-square per-pixel difference.
    pub distance: f64,
    pub flipped: bool,
}

fn rms(a: &[f32], b: &[f32]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Exact nearest neighbours over the training set and its mirror images.
pub fn memorization_check(generated: &ImageBatch, training: &ImageBatch) -> Result<Vec<NearestMatch>> {
    if generated.n == 0 || training.n == 0 {
        return Err(SphereError::EmptyDataset("memorization check needs two nonempty sets".into()));
    }
    if generated.image_len() != training.image_len() {
        return Err(SphereError::shape(training.image_len(), generated.image_len()));
    }
    let (h, w, c) = (training.height, training.width, training.channels);
    let flipped: Vec<Vec<f32>> = (0..training.n).map(|i| flip_horizontal(training.image(i), h, w, c)).collect();
    Ok((0..generated.n)
        .map(|g| {
            let img = generated.image(g);
            let mut best = NearestMatch {
                index: 0,
                distance: f64::INFINITY,
                flipped: false,
            };
            for t in 0..training.n {
                for (flip, cand) in [(false, training.image(t)), (true, flipped[t].as_slice())] {
                    let d = rms(img, cand);
                    if d < best.distance {
                        best = NearestMatch {
                            index: t,
                            distance: d,
                            flipped: flip,
                        };
                    }
                }
            }
            best
        })
        .collect())
}

/// Median RMS distance over all unordered pairs of the set.
pub fn median_pairwise_distance(images: &ImageBatch) -> f64 {
    let mut d = Vec::new();
    for i in 0..images.n {
        for j in i + 1..images.n {
            d.push(rms(images.image(i), images.image(j)));
        }
    }
    median(&d)
}

/// Appends `key = value` lines to a plain-text summary.
pub fn write_summary(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| SphereError::io(format!("creating {}", path.display()), e))?;
    for (k, v) in entries {
        writeln!(f, "{k} = {v}").map_err(|e| SphereError::io("writing summary", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            count: 1000,
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let d = frechet_feature_distance(&stats_1d(0.0, 1.0), &stats_1d(3.0, 1.0)).unwrap();
        assert!((d - 9.0).abs() < 1e-6, "{d}");
        let d = frechet_feature_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(0.0, 1.0).unwrap();
        let rows = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..200).map(|_| (0..6).map(|k| n.sample(rng) * (1.0 + k as f64 * 0.3) + shift).collect()).collect()
        };
        let a = FeatureStats::from_rows(&rows(&mut rng, 0.0)).unwrap();
        let b = FeatureStats::from_rows(&rows(&mut rng, 0.5)).unwrap();
        assert!(frechet_feature_distance(&a, &a).unwrap().abs() < 1e-6);
        let ab = frechet_feature_distance(&a, &b).unwrap();
        let ba = frechet_feature_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
        assert!(ab > 1.0);
    }

    #[test]
    fn frechet_dimension_mismatch() {
        let a = stats_1d(0.0, 1.0);
        let b = FeatureStats::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(frechet_feature_distance(&a, &b).is_err());
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0) + 1e3).collect())
            .collect();
        let s = FeatureStats::from_rows(&rows).unwrap();
        let n = rows.len() as f64;
        for i in 0..5 {
            let mi: f64 = rows.iter().map(|r| r[i]).sum::<f64>() / n;
            assert!((s.mean[i] - mi).abs() < 1e-8);
            for j in 0..5 {
                let mj: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let c: f64 = rows.iter().map(|r| (r[i] - mi) * (r[j] - mj)).sum::<f64>() / (n - 1.0);
                assert!((s.cov[(i, j)] - c).abs() < 1e-8);
                assert!((s.cov[(i, j)] - s.cov[(j, i)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sqrt_of_psd_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sym_sqrt(&a);
        assert!((&r * &r - &a).abs().max() < 1e-10);
    }

    fn batch_with(images: &[Vec<f32>], h: usize, w: usize, c: usize) -> ImageBatch {
        let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
        ImageBatch::from_images(h, w, c, &refs)
    }

    #[test]
    fn memorization_finds_planted_and_flipped() {
        let train = noise_images(10, 4, 5, 3, 1);
        let planted = train.image(3).to_vec();
        let flipped = flip_horizontal(train.image(7), 4, 5, 3);
        let gen = batch_with(&[planted, flipped], 4, 5, 3);
        let m = memorization_check(&gen, &train).unwrap();
        assert_eq!((m[0].index, m[0].distance), (3, 0.0));
        assert_eq!((m[1].index, m[1].distance, m[1].flipped), (7, 0.0, true));
    }

    #[test]
    fn memorization_is_order_invariant() {
        let train = noise_images(12, 4, 4, 1, 2);
        let gen = noise_images(5, 4, 4, 1, 3);
        let perm: Vec<usize> = (0..12).rev().collect();
        let a = memorization_check(&gen, &train).unwrap();
        let b = memorization_check(&gen, &train.select(&perm)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.distance, y.distance);
            assert_eq!(perm[y.index], x.index);
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
