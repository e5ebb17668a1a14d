//! Seeded matrix draws.

use groupmuon_core::Matrix64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_from(rows, cols, &mut rng)
}

pub fn gaussian_from<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix64 {
    Matrix64::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}
