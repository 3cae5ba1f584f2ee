#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tldr::eval::WeightMode;
use tldr::pipeline::PipelineConfig;
use tldr::train::{OptimizerKind, Schedule, TrainConfig};
use tldr::vocab::FilterOptions;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

pub fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let v = gaussian_vec(rng, n);
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Largest `|a − b| / |b|` over entries (absolute where `b` is zero).
pub fn max_rel_dev<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if *y == 0.0 {
                d
            } else {
                d / y.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Retraining settings used on the synthetic presets.
pub fn synth_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 0.05,
        weight_decay: 0.0,
        momentum: 0.9,
        batch_size: 256,
        epochs: 30,
        scheduler: Schedule::Cosine,
        relu_on_projection: true,
        seed,
        cache_projection: false,
    }
}

pub fn synth_pipeline_config(gap_pairs: usize, seed: u64) -> PipelineConfig {
    PipelineConfig {
        lambda_grid: (1..=100).map(f64::from).collect(),
        gap_pairs,
        filter: FilterOptions::default(),
        train: synth_train_config(seed),
        weights: WeightMode::Train,
    }
}
