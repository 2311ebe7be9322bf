use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{gaussian_vec, sample_sphere_uniform};

fn images(model: &SphereModel, n: usize, seed: u64) -> Tensor {
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = gaussian_vec(n * c.pixel_count(), &mut rng)
        .into_iter()
        .map(|x| x.tanh())
        .collect();
    Tensor::from_vec(data, (n, c.image_size, c.image_size, c.channels), &candle_core::Device::Cpu)
        .unwrap()
        .to_dtype(model.dtype())
        .unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn small(image_size: usize, patch_size: usize, d: usize) -> ModelConfig {
    ModelConfig {
        image_size,
        patch_size,
        latent_channels: d,
        hidden_size: 16,
        n_blocks: 1,
        n_heads: 2,
        mixer_depth: 1,
        mlp_ratio: 2,
        ..ModelConfig::tiny()
    }
}

#[test]
fn latent_shapes_follow_config() {
    for (size, p) in [(16, 2), (24, 2), (32, 2), (32, 4)] {
        for d in [4, 8, 16] {
            let cfg = small(size, p, d);
            let model = SphereModel::new(cfg.clone(), DType::F32, 0).unwrap();
            let z = model.encode(&images(&model, 1, 0), &Condition::null(1)).unwrap();
            assert_eq!(z.dims(), &[1, size / p, size / p, d]);
            assert_eq!(cfg.latent_len(), (size / p) * (size / p) * d);
        }
    }
    let model = SphereModel::new(small(32, 2, 8), DType::F32, 0).unwrap();
    let x = images(&model, 2, 1);
    let z = model.encode(&x, &Condition::classes(&[0, 1])).unwrap();
    assert_eq!(z.dims(), &[2, 16, 16, 8]);
    let out = model.decode(&spherify_batch(&z).unwrap(), &Condition::classes(&[0, 1])).unwrap();
    assert_eq!(out.dims(), x.dims());
}

#[test]
fn encoder_norm_is_bounded() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F64, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    model.params().perturb(0.5, &mut rng).unwrap();
    let radius = (model.config().latent_len() as f64).sqrt();
    let x = (images(&model, 6, 2) * 50.0).unwrap();
    let z = model.encode(&x, &Condition::null(6)).unwrap();
    for row in z.reshape((6, ())).unwrap().to_vec2::<f64>().unwrap() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n <= radius + 1e-4, "{n} > {radius}");
    }
}

#[test]
fn construction_and_forward_are_deterministic() {
    let a = SphereModel::new(ModelConfig::tiny(), DType::F32, 11).unwrap();
    let b = SphereModel::new(ModelConfig::tiny(), DType::F32, 11).unwrap();
    let x = images(&a, 2, 5);
    let cond = Condition::classes(&[0, 1]);
    assert_eq!(flat(&a.encode(&x, &cond).unwrap()), flat(&b.encode(&x, &cond).unwrap()));
    let c = SphereModel::new(ModelConfig::tiny(), DType::F32, 12).unwrap();
    assert_ne!(flat(&a.encode(&x, &cond).unwrap()), flat(&c.encode(&x, &cond).unwrap()));
}

#[test]
fn adaln_zero_makes_condition_inert_at_init() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F64, 0).unwrap();
    let x = images(&model, 2, 0);
    let z0 = flat(&model.encode(&x, &Condition::classes(&[0, 0])).unwrap());
    let z1 = flat(&model.encode(&x, &Condition::classes(&[1, 1])).unwrap());
    let zn = flat(&model.encode(&x, &Condition::null(2)).unwrap());
    assert_eq!(z0, z1);
    assert_eq!(z0, zn);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    model.params().perturb(0.2, &mut rng).unwrap();
    let z0 = flat(&model.encode(&x, &Condition::classes(&[0, 0])).unwrap());
    let z1 = flat(&model.encode(&x, &Condition::classes(&[1, 1])).unwrap());
    let zn = flat(&model.encode(&x, &Condition::null(2)).unwrap());
    assert_ne!(z0, z1);
    assert_ne!(z0, zn);
}

#[test]
fn zero_head_decodes_constant_image() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F32, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = model.config().latent_shape();
    let v: Vec<f64> = (0..3).flat_map(|_| sample_sphere_uniform(shape, &mut rng, None).into_values()).collect();
    let v = Tensor::from_vec(v, (3, shape.len()), &candle_core::Device::Cpu).unwrap();
    let out = flat(&model.decode(&v, &Condition::null(3)).unwrap());
    assert!(out.iter().all(|&p| p == out[0]));
}

#[test]
fn decoding_sphere_points_is_finite_and_bounded() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F32, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    model.params().perturb(0.3, &mut rng).unwrap();
    let shape = model.config().latent_shape();
    let v: Vec<f64> = (0..8).flat_map(|_| sample_sphere_uniform(shape, &mut rng, None).into_values()).collect();
    let v = Tensor::from_vec(v, (8, shape.len()), &candle_core::Device::Cpu).unwrap();
    let out = flat(&model.decode(&v, &Condition::classes(&[0, 1, 0, 1, 0, 1, 0, 1])).unwrap());
    assert!(out.iter().all(|p| p.is_finite() && p.abs() <= 1.0));
}

#[test]
fn wrong_input_shape_is_config_mismatch() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F32, 0).unwrap();
    let x = Tensor::zeros((1, 12, 12, 3), DType::F32, &candle_core::Device::Cpu).unwrap();
    assert!(matches!(model.encode(&x, &Condition::null(1)), Err(crate::SphereError::ConfigMismatch(_))));
    let x = images(&model, 1, 0);
    assert!(matches!(
        model.encode(&x, &Condition::classes(&[5])),
        Err(crate::SphereError::InvalidClass { id: 5, .. })
    ));
}

#[test]
fn spherify_batch_norms_and_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Tensor::from_vec(gaussian_vec(3 * 64, &mut rng), (3, 4, 4, 4), &candle_core::Device::Cpu).unwrap();
    for row in spherify_batch(&z).unwrap().to_vec2::<f64>().unwrap() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 8.0).abs() < 1e-12);
    }
    let zero = Tensor::zeros((1, 16), DType::F64, &candle_core::Device::Cpu).unwrap();
    assert!(matches!(spherify_batch(&zero), Err(crate::SphereError::DegenerateLatent { .. })));
}

#[test]
fn rotary_tensor_is_isometry_and_relative() {
    let cfg = ModelConfig::tiny();
    let n = cfg.n_tokens();
    let dh = cfg.head_dim();
    let (cos, sin) = positional::rotary_2d(cfg.grid(), dh);
    let dev = candle_core::Device::Cpu;
    let rope = Rotary {
        cos: Tensor::from_vec(cos, (n, dh), &dev).unwrap(),
        sin: Tensor::from_vec(sin, (n, dh), &dev).unwrap(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = Tensor::from_vec(gaussian_vec(n * dh, &mut rng), (1, 1, n, dh), &dev).unwrap();
    let rq = rope.apply(&q).unwrap();
    let norms = |t: &Tensor| -> Vec<f64> { t.sqr().unwrap().sum(3).unwrap().flatten_all().unwrap().to_vec1().unwrap() };
    for (a, b) in norms(&q).iter().zip(norms(&rq)) {
        assert!((a - b).abs() < 1e-10);
    }
    // Same vector at every position: scores depend only on the offset.
    let one = gaussian_vec(dh, &mut rng);
    let rep: Vec<f64> = (0..n).flat_map(|_| one.clone()).collect();
    let r = rope.apply(&Tensor::from_vec(rep, (1, 1, n, dh), &dev).unwrap()).unwrap();
    let rows = r.reshape((n, dh)).unwrap().to_vec2::<f64>().unwrap();
    let dot = |i: usize, j: usize| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
    let g = cfg.grid();
    // (0,0)·(0,1) equals (1,1)·(1,2): same row/column offset.
    assert!((dot(0, 1) - dot(g + 1, g + 2)).abs() < 1e-10);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F32, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    model.params().perturb(0.1, &mut rng).unwrap();
    let ckpt = Checkpoint::from_model(&model, 42, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, Some(&ModelConfig::tiny())).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!((back.step, back.seed), (42, 7));
    let restored = back.to_model(DType::F32).unwrap();
    let x = images(&model, 2, 1);
    let cond = Condition::classes(&[1, 0]);
    let a = flat(&model.encode(&x, &cond).unwrap());
    let b = flat(&restored.encode(&x, &cond).unwrap());
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn checkpoint_errors() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F32, 5).unwrap();
    let bytes = Checkpoint::from_model(&model, 0, 0).unwrap().to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    let mut other = ModelConfig::tiny();
    other.latent_channels = 8;
    assert!(matches!(
        Checkpoint::load(&path, Some(&other)),
        Err(crate::SphereError::ConfigMismatch(_))
    ));
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&path, None), Err(crate::SphereError::CorruptCheckpoint(_))));
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(crate::SphereError::CorruptCheckpoint(_))));
    let mut versioned = bytes;
    versioned[8] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&versioned),
        Err(crate::SphereError::VersionMismatch { found: 9, expected: 1 })
    ));
    let wrong = SphereModel::new(other, DType::F32, 0).unwrap();
    let ckpt = Checkpoint::from_model(&model, 0, 0).unwrap();
    assert!(matches!(ckpt.load_into(&wrong), Err(crate::SphereError::ConfigMismatch(_))));
}

#[test]
fn pass_counter_tracks_kinds() {
    let model = SphereModel::new(ModelConfig::tiny(), DType::F32, 0).unwrap();
    let x = images(&model, 1, 0);
    model.encode(&x, &Condition::classes(&[0])).unwrap();
    model.encode(&x, &Condition::null(1)).unwrap();
    let z = model.encode(&x, &Condition::null(1)).unwrap();
    model.decode(&spherify_batch(&z).unwrap(), &Condition::classes(&[1])).unwrap();
    let c = model.counter().snapshot();
    assert_eq!((c.encoder_cond, c.encoder_null, c.decoder_cond, c.decoder_null), (1, 2, 1, 0));
    model.counter().reset();
    assert_eq!(model.counter().snapshot().total(), 0);
}
