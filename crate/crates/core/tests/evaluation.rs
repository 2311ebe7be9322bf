use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sphere_core::batch::mean_abs_diff;
use sphere_core::data::{synth_generate, DatasetSpec};
use sphere_core::evaluation::{
    conditional_uniformity, interpolation_grid, median, median_pairwise_distance, memorization_check, noise_images,
    reconstruction_errors, write_projection_csv, Corner,
};
use sphere_core::geometry::{sample_sphere_uniform, NoisePolicy, SphereVector};
use sphere_core::network::{tensor_to_images, Condition, Label, ModelConfig, SphereModel};
use sphere_core::sampling::SamplerPlan;

fn model() -> SphereModel {
    let m = SphereModel::new(ModelConfig::tiny(), DType::F32, 4).unwrap();
    m.params().perturb(0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    m
}

fn corner(m: &SphereModel, seed: u64, label: Label) -> Corner {
    let shape = m.config().latent_shape();
    Corner {
        latent: sample_sphere_uniform(shape, &mut ChaCha8Rng::seed_from_u64(seed), None),
        label,
    }
}

fn decode_one(m: &SphereModel, v: &SphereVector, label: Label) -> Vec<f32> {
    let t = Tensor::from_vec(v.values().to_vec(), (1, v.len()), &candle_core::Device::Cpu)
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap();
    let x = m.decode(&t, &Condition::labels(&[label])).unwrap();
    tensor_to_images(&x).unwrap().image(0).to_vec()
}

#[test]
fn two_by_two_grid_reproduces_corners() {
    let m = model();
    let corners = [
        corner(&m, 1, Label::Class(0)),
        corner(&m, 2, Label::Class(1)),
        corner(&m, 3, Label::Class(1)),
        corner(&m, 4, Label::Null),
    ];
    let grid = interpolation_grid(&m, &corners, 2, &SamplerPlan::default(), &NoisePolicy::default()).unwrap();
    assert_eq!(grid.n, 4);
    for (i, c) in corners.iter().enumerate() {
        let want = decode_one(&m, &c.latent, c.label);
        assert!(mean_abs_diff(grid.image(i), &want) < 1e-5, "corner {i}");
    }
}

#[test]
fn constant_corners_give_constant_grid() {
    let m = model();
    let c = corner(&m, 5, Label::Class(1));
    let corners = [c.clone(), c.clone(), c.clone(), c];
    let plan = SamplerPlan {
        steps: 2,
        ..SamplerPlan::default()
    };
    let grid = interpolation_grid(&m, &corners, 3, &plan, &NoisePolicy::default()).unwrap();
    for i in 1..9 {
        assert!(mean_abs_diff(grid.image(0), grid.image(i)) < 1e-5);
    }
}

#[test]
fn grid_is_continuous() {
    let m = model();
    let corners = [
        corner(&m, 11, Label::Class(0)),
        corner(&m, 12, Label::Class(0)),
        corner(&m, 13, Label::Class(1)),
        corner(&m, 14, Label::Class(1)),
    ];
    let n = 9;
    let grid = interpolation_grid(&m, &corners, n, &SamplerPlan::default(), &NoisePolicy::default()).unwrap();
    let far = mean_abs_diff(grid.image(0), grid.image(n * n - 1));
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if j + 1 < n {
                worst = worst.max(mean_abs_diff(grid.image(i * n + j), grid.image(i * n + j + 1)));
            }
            if i + 1 < n {
                worst = worst.max(mean_abs_diff(grid.image(i * n + j), grid.image((i + 1) * n + j)));
            }
        }
    }
    assert!(far > 0.0);
    assert!(worst < 0.5 * far, "neighbour step {worst} vs span {far}");
    assert!(interpolation_grid(&m, &corners, 1, &SamplerPlan::default(), &NoisePolicy::default()).is_err());
}

#[test]
fn uniformity_report_is_deterministic_and_pools_single_class() {
    let m = model();
    let ds = synth_generate(&DatasetSpec::synthetic(8, 3, 1, 12), 3).unwrap();
    let a = conditional_uniformity(&m, &ds, 5).unwrap();
    let b = conditional_uniformity(&m, &ds, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_class.len(), 1);
    assert_eq!(a.pooled, a.per_class[0].1);
    assert_eq!(a.coords.len(), 12);
    for (_, p) in &a.coords {
        assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-9);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_projection_csv(&path, &a.coords, &ds.class_names).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().nth(1).unwrap().starts_with("circle,"));
}

#[test]
fn noise_is_far_from_training_set() {
    let ds = synth_generate(&DatasetSpec::synthetic(8, 3, 3, 6), 1).unwrap();
    let noise = noise_images(4, 8, 8, 3, 77);
    let typical = median_pairwise_distance(&ds.images);
    for m in memorization_check(&noise, &ds.images).unwrap() {
        assert!(m.distance > typical, "{} vs {typical}", m.distance);
    }
}

#[test]
fn reconstruction_errors_per_image() {
    let m = model();
    let ds = synth_generate(&DatasetSpec::synthetic(8, 3, 2, 3), 2).unwrap();
    let errs = reconstruction_errors(&m, &ds.images).unwrap();
    assert_eq!(errs.len(), 6);
    assert!(errs.iter().all(|e| e.is_finite() && *e > 0.0));
    let med = median(&errs);
    assert!(errs.iter().any(|&e| e <= med) && errs.iter().any(|&e| e >= med));
}
