use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{DType, Tensor};

/// Deterministic generator for `(seed, stream)`; distinct streams never overlap.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `rows×cols` tensor with entries drawn from `uniform(-bound, bound)`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64, dtype: DType) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_rows(rows, cols, data, dtype)
}

pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
