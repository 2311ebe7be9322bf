//! Wall-clock time of a few training steps.
//!
//! `cargo run --release --example step_time [size hidden blocks patch [batch]]`
//! (defaults: the `toy_fast` model, batch 16).

use std::time::Instant;

use candle_core::DType;
use sphere_core::data::{synth_generate, DatasetSpec};
use sphere_core::geometry::NoisePolicy;
use sphere_core::losses::{FeatureExtractor, LossWeights};
use sphere_core::network::{ModelConfig, SphereModel};
use sphere_core::training::{train_step, StepContext, TrainConfig, TrainState};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let mut cfg = ModelConfig::toy_fast();
    if args.len() >= 4 {
        cfg.image_size = args[0];
        cfg.hidden_size = args[1];
        cfg.n_blocks = args[2];
        cfg.patch_size = args[3];
    }
    let batch = args.get(4).copied().unwrap_or(16);
    let model = SphereModel::new(cfg.clone(), DType::F32, 0).unwrap();
    println!("{} params", model.params().n_scalars());
    let ds = synth_generate(&DatasetSpec::synthetic(cfg.image_size, 3, 3, 32), 0).unwrap();
    let train = TrainConfig {
        batch_size: batch,
        learning_rate: 1e-3,
        min_learning_rate: 1e-5,
        warmup_epochs: 1,
        total_epochs: 10,
        weight_decay: 0.0,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        grad_clip: 1.0,
        checkpoint_every: 0,
        seed: 0,
    };
    let fx = FeatureExtractor::new(3, 0, DType::F32).unwrap();
    let policy = NoisePolicy::default();
    let weights = LossWeights::default();
    let ctx = StepContext { fx: &fx, policy: &policy, weights: &weights, train: &train, steps_per_epoch: 6 };
    let mut state = TrainState::new(&train);
    let idx: Vec<usize> = (0..batch).collect();
    let x = model.images_to_tensor(&ds.images.select(&idx)).unwrap();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    for i in 0..6 {
        let t = Instant::now();
        let r = train_step(&model, &mut state, &ctx, &x, &labels, i).unwrap();
        println!("step {i}: {:?} {:.3}s", r, t.elapsed().as_secs_f64());
    }
}
