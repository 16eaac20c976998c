//! Seeded random sources shared by generators, Monte-Carlo estimators and
//! oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{svd, Matrix};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from `seed` and a domain tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

/// Haar-ish random orthogonal matrix from the left singular vectors of a
/// Gaussian matrix.
pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> Matrix {
    let g = gaussian_matrix(rng, n, n);
    let f = svd(&g).expect("gaussian matrices are finite");
    f.u.matmul(&f.vt).expect("square factors")
}
