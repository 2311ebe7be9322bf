use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sphere_core::geometry::NoisePolicy;
use sphere_core::network::{Label, ModelConfig, SphereModel};
use sphere_core::sampling::{
    apply_cfg_tensor, crossover, generate, manipulate, reconstruct, stitch, CfgPosition, EditPlan, SamplerPlan, Stitch,
};
use sphere_core::SphereError;

fn model(n_classes: usize) -> SphereModel {
    let cfg = ModelConfig {
        n_classes,
        ..ModelConfig::tiny()
    };
    let m = SphereModel::new(cfg, DType::F32, 1).unwrap();
    m.params().perturb(0.05, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    m
}

fn vals(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn images(m: &SphereModel, n: usize, seed: u64) -> Tensor {
    let c = m.config();
    let data: Vec<f32> = (0..n * c.pixel_count())
        .map(|i| (i as f32 * 0.37 + seed as f32).sin())
        .collect();
    Tensor::from_vec(data, (n, c.image_size, c.image_size, c.channels), &candle_core::Device::Cpu).unwrap()
}

#[test]
fn one_step_never_encodes() {
    let m = model(2);
    let out = generate(&m, &[Label::Class(0), Label::Class(1)], &SamplerPlan::default(), &NoisePolicy::default()).unwrap();
    assert_eq!(out.passes.encoder_cond + out.passes.encoder_null, 0);
    assert_eq!(out.passes.decoder_cond, 1);
    assert!(out.refinement_noise.is_empty());
    assert_eq!(out.images.dims(), &[2, 8, 8, 3]);
}

#[test]
fn shared_noise_reuses_one_direction() {
    let m = model(2);
    let plan = SamplerPlan {
        steps: 4,
        share_noise: true,
        ..SamplerPlan::default()
    };
    let out = generate(&m, &[Label::Class(1)], &plan, &NoisePolicy::default()).unwrap();
    assert_eq!(out.refinement_noise.len(), 3);
    let first = vals(&out.refinement_noise[0]);
    assert!(out.refinement_noise.iter().all(|e| vals(e) == first));

    let fresh = SamplerPlan {
        share_noise: false,
        ..plan
    };
    let out = generate(&m, &[Label::Class(1)], &fresh, &NoisePolicy::default()).unwrap();
    assert_ne!(vals(&out.refinement_noise[0]), vals(&out.refinement_noise[1]));
}

#[test]
fn generation_is_seed_deterministic() {
    let m = model(2);
    let plan = SamplerPlan {
        steps: 3,
        gamma: 1.0,
        cfg_scale: 1.7,
        cfg_position: CfgPosition::Combo,
        truncation: Some(1.5),
        seed: 42,
        ..SamplerPlan::default()
    };
    let labels = [Label::Class(0), Label::Null];
    let a = generate(&m, &labels, &plan, &NoisePolicy::default()).unwrap();
    let b = generate(&m, &labels, &plan, &NoisePolicy::default()).unwrap();
    assert_eq!(vals(&a.images), vals(&b.images));
    let c = generate(&m, &labels, &SamplerPlan { seed: 43, ..plan }, &NoisePolicy::default()).unwrap();
    assert_ne!(vals(&a.images), vals(&c.images));
}

#[test]
fn r_override_zero_means_noiseless_refinement() {
    let m = model(2);
    let plan = SamplerPlan {
        steps: 2,
        r_override: Some(0.0),
        ..SamplerPlan::default()
    };
    let a = generate(&m, &[Label::Class(0)], &plan, &NoisePolicy::default()).unwrap();
    assert!(vals(&a.images).iter().all(|v| v.is_finite()));
}

#[test]
fn cfg_tensor_endpoints() {
    let dev = candle_core::Device::Cpu;
    let c = Tensor::new(&[0.1f32, 0.2, -0.3], &dev).unwrap();
    let u = Tensor::new(&[1.0f32, -2.0, 0.5], &dev).unwrap();
    assert_eq!(vals(&apply_cfg_tensor(&c, &u, 1.0).unwrap()), vals(&c));
    assert_eq!(vals(&apply_cfg_tensor(&c, &u, 0.0).unwrap()), vals(&u));
    let two = vals(&apply_cfg_tensor(&c, &u, 2.0).unwrap());
    assert!((two[0] - (-0.8)).abs() < 1e-6);
    let short = Tensor::new(&[1.0f32], &dev).unwrap();
    assert!(apply_cfg_tensor(&c, &short, 2.0).is_err());
}

#[test]
fn reconstruct_keeps_shape() {
    let m = model(2);
    let x = images(&m, 3, 0);
    let r = reconstruct(&m, &x).unwrap();
    assert_eq!(r.dims(), x.dims());
    let counts = m.counter().snapshot();
    assert_eq!((counts.encoder_null, counts.decoder_null), (1, 1));
}

#[test]
fn manipulate_checks_class_support() {
    let policy = NoisePolicy::default();
    let uncond = model(0);
    let x = images(&uncond, 1, 0);
    assert!(matches!(
        manipulate(&uncond, &x, &EditPlan::manipulate(0, 1), &policy),
        Err(SphereError::InvalidClass { id: 0, n_classes: 0 })
    ));
    let cond = model(2);
    assert!(matches!(
        manipulate(&cond, &x, &EditPlan::manipulate(5, 1), &policy),
        Err(SphereError::InvalidClass { id: 5, .. })
    ));
    cond.counter().reset();
    let out = manipulate(&cond, &x, &EditPlan::manipulate(1, 1), &policy).unwrap();
    assert_eq!(out.dims(), x.dims());
    let c = cond.counter().snapshot();
    assert_eq!((c.encoder_cond, c.decoder_cond, c.encoder_null + c.decoder_null), (1, 1, 0));
}

#[test]
fn stitch_and_crossover() {
    let m = model(2);
    let policy = NoisePolicy::default();
    let a = images(&m, 1, 1);
    let b = images(&m, 1, 7);
    let s = stitch(&a, &b, Stitch::LeftRight { at: 3 }).unwrap();
    let (sv, av, bv) = (vals(&s), vals(&a), vals(&b));
    for y in 0..8 {
        for x in 0..8 {
            for c in 0..3 {
                let i = (y * 8 + x) * 3 + c;
                assert_eq!(sv[i], if x < 3 { av[i] } else { bv[i] });
            }
        }
    }
    let s = stitch(&a, &b, Stitch::TopBottom { at: 5 }).unwrap();
    assert_eq!(vals(&s)[4 * 24], av[4 * 24]);
    assert_eq!(vals(&s)[5 * 24], bv[5 * 24]);

    let mut plan = EditPlan::crossover(Stitch::LeftRight { at: 4 });
    plan.steps = 0;
    assert_eq!(vals(&crossover(&m, &a, &b, &plan, &policy).unwrap()), vals(&stitch(&a, &b, Stitch::LeftRight { at: 4 }).unwrap()));
    plan.steps = 3;
    let out = crossover(&m, &a, &b, &plan, &policy).unwrap();
    assert_eq!(out.dims(), a.dims());
    let wrong = images(&m, 2, 0);
    assert!(stitch(&a, &wrong, Stitch::LeftRight { at: 4 }).is_err());
    assert!(stitch(&a, &b, Stitch::LeftRight { at: 9 }).is_err());
}
