//! Shared fixtures for the criterion benchmarks.

use gaitadapt_core::data::{standard_stream, FrameShape};
use gaitadapt_core::eval::StepDataset;
use gaitadapt_core::trainer::TrainConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk configuration with a short step.
pub fn desk_config(iterations: usize) -> TrainConfig {
    TrainConfig { iterations_per_step: iterations, log_every: 0, ..TrainConfig::desk() }
}

/// First domain of the standard synthetic stream at the configuration's frame shape.
pub fn first_step(config: &TrainConfig) -> StepDataset {
    let shape = FrameShape { frames: config.sequence_length, height: config.frame_height, width: config.frame_width };
    standard_stream(0, shape).expect("standard stream").swap_remove(0)
}

pub fn uniform(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Labels `0..ids`, each repeated `per_id` times.
pub fn labels(ids: u32, per_id: usize) -> Vec<u32> {
    (0..ids).flat_map(|i| std::iter::repeat_n(i, per_id)).collect()
}
