//! Multiplicative Gaussian noise and per-sample random streams.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor3;

/// `len` independent `N(1, std^2)` factors. `std = 0` gives exact ones.
pub fn noise_factors<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<f64> {
    if std == 0.0 {
        return vec![1.0; len];
    }
    let normal = Normal::new(1.0, std).expect("noise std must be finite and non-negative");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Multiplies every activation by an independent `N(1, std^2)` factor.
pub fn apply_multiplicative_noise<R: Rng + ?Sized>(activations: &Tensor3, std: f64, rng: &mut R) -> Tensor3 {
    if std == 0.0 {
        return activations.clone();
    }
    let factors = noise_factors(activations.len(), std, rng);
    let (h, w, c) = activations.dims();
    let data = activations.data().iter().zip(&factors).map(|(a, f)| a * f).collect();
    Tensor3::from_raw(h, w, c, data)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the random stream owned by one sample in one epoch. Streams do not
/// depend on batch composition or evaluation order.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ epoch as u64) ^ index as u64)
}
