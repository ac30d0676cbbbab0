//! Seeded synthetic tensors, so every experiment runs without external data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4D};

/// Deterministic RNG used for all synthetic data.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Samples from `N(0, std^2)`.
pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Result<Vec<f32>> {
    let dist = Normal::new(0.0f32, std).map_err(|e| Error::config(format!("bad std {std}: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

pub fn gaussian(shape: Shape4, seed: u64, std: f32) -> Result<Tensor4D> {
    let mut r = rng(seed);
    Tensor4D::new(shape, gaussian_vec(&mut r, shape.numel(), std)?)
}

/// Gaussian samples passed through ReLU, as seen by a post-activation layer.
pub fn rectified_gaussian(shape: Shape4, seed: u64, std: f32) -> Result<Tensor4D> {
    Ok(gaussian(shape, seed, std)?.relu())
}
