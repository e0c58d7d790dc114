use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ToyConfig;

/// 2D samples with class labels. Target labels are for oracle evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub source: Vec<[f64; 2]>,
    pub source_labels: Vec<usize>,
    pub target: Vec<[f64; 2]>,
    pub target_labels: Vec<usize>,
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

/// Splits `total` into `parts` near-equal counts, remainder to the first parts.
fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|k| total / parts + usize::from(k < total % parts))
        .collect()
}

/// Target cluster centers and the source class each one was shifted from.
pub fn target_centers(config: &ToyConfig) -> Vec<([f64; 2], usize)> {
    let n_classes = config.source_means.len();
    match config.target_modes {
        Some(modes) => {
            // Mode m shifts class (m + 1) % C, so a single mode is the shifted
            // class-1 Gaussian; further modes rotate the shift around the base.
            let per_class = modes.div_ceil(n_classes);
            (0..modes)
                .map(|m| {
                    let class = (m + 1) % n_classes;
                    let turn = (m / n_classes) as f64 / per_class as f64;
                    let shift = rotate(config.target_shift, TAU * turn);
                    (add(config.source_means[class], shift), class)
                })
                .collect()
        }
        None => config
            .target_classes
            .iter()
            .map(|&c| {
                let center = if config.shifted_classes.contains(&c) {
                    add(config.source_means[c], config.target_shift)
                } else {
                    config.source_means[c]
                };
                (center, c)
            })
            .collect(),
    }
}

/// Draws the source and target sets. Source and target use separate ChaCha8
/// streams of `rng_seed`, so changing the target layout leaves the source
/// sample untouched.
pub fn generate_toy_data(config: &ToyConfig) -> ToyData {
    let noise = Normal::new(0.0, config.source_std).expect("positive std");

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(0);
    let mut source = Vec::new();
    let mut source_labels = Vec::new();
    for (c, mean) in config.source_means.iter().enumerate() {
        for _ in 0..config.n_per_class {
            source.push([
                mean[0] + noise.sample(&mut rng),
                mean[1] + noise.sample(&mut rng),
            ]);
            source_labels.push(c);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(1);
    let centers = target_centers(config);
    let mut target = Vec::with_capacity(config.n_target);
    let mut target_labels = Vec::with_capacity(config.n_target);
    for ((center, class), count) in centers
        .iter()
        .zip(split_even(config.n_target, centers.len()))
    {
        for _ in 0..count {
            target.push([
                center[0] + noise.sample(&mut rng),
                center[1] + noise.sample(&mut rng),
            ]);
            target_labels.push(*class);
        }
    }

    ToyData {
        source,
        source_labels,
        target,
        target_labels,
    }
}
