//! Seeded inputs shared by the benchmarks under `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fchc_core::{ScoreMatrix, Taxonomy, Tensor};

/// Uniform scores in [0, 1) for `rows` samples of `t`.
pub fn scores(t: &Taxonomy, rows: usize, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * t.len()).map(|_| rng.random::<f64>()).collect();
    ScoreMatrix::for_taxonomy(t, rows, values).expect("uniform scores are in range")
}

/// `n` uniform points with `dims` features.
pub fn points(n: usize, dims: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(n, dims, (0..n * dims).map(|_| rng.random::<f64>()).collect()).expect("shape matches data")
}
