//! Seed derivation and weight initialization.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by hashing a
//! string salt with the user seed, so distinct purposes (rendering, corpus
//! order, weight init) never share a stream and runs replay bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;

/// Derive an independent 64-bit seed from a purpose salt and a user seed.
pub fn derive_seed(seed: u64, salt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn seeded(seed: u64, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, salt))
}

/// Zero-mean normal tensor with the given deviation.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, sigma).expect("sigma must be finite and positive");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("normal draws are finite")
}

/// Xavier/Glorot normal init for a linear map `[fan_in, fan_out]`.
pub fn xavier_tensor(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let sigma = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_tensor(rng, vec![fan_in, fan_out], sigma)
}
