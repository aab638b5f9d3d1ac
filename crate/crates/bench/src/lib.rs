//! Shared fixtures for the criterion benches.

use hatehead::head::PENULTIMATE_DIM;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Batch of penultimate embeddings with alternating labels and every third
/// row hard.
pub fn mining_batch(batch: usize, seed: u64) -> (Array2<f64>, Vec<u8>, Vec<bool>) {
    let pen = random_matrix(batch, PENULTIMATE_DIM, seed);
    let labels = (0..batch).map(|i| (i % 2) as u8).collect();
    let hard = (0..batch).map(|i| i % 3 == 0).collect();
    (pen, labels, hard)
}
