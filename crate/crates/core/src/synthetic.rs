//! Seeded synthetic tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use crate::training::LabeledSet;

/// Smallest distance between a point and the separating line.
pub const SEPARABLE_MARGIN: f64 = 0.1;

/// Two-class points in `[-1, 1]^2` split by a seeded line through the
/// square, each at least [`SEPARABLE_MARGIN`] from it. Images are `1 x 1 x 2`.
pub fn separable_2d(n: usize, seed: u64) -> Result<LabeledSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (nx, ny) = (angle.cos(), angle.sin());
    let offset: f64 = rng.random_range(-0.3..0.3);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while images.len() < n {
        let (x, y): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let side = nx * x + ny * y - offset;
        if side.abs() < SEPARABLE_MARGIN {
            continue;
        }
        // alternate classes so both are equally represented
        let want = images.len() % 2;
        if usize::from(side > 0.0) != want {
            continue;
        }
        images.push(Tensor3::new(1, 1, 2, vec![x, y])?);
        labels.push(want);
    }
    LabeledSet::new(images, labels)
}

/// Images in `[0, 1]` drawn around one seeded prototype per class:
/// `clamp(0.5 + 0.25 * prototype + 0.15 * noise)` with standard normal
/// prototypes and noise. Labels cycle through the classes.
pub fn gaussian_mixture_images(n: usize, dims: (usize, usize, usize), classes: usize, seed: u64) -> Result<LabeledSet> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 classes, got {classes}")));
    }
    let (h, w, c) = dims;
    if h * w * c == 0 {
        return Err(Error::Shape(format!("image dims {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..h * w * c).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let data = prototypes[label]
            .iter()
            .map(|p| (0.5 + 0.25 * p + 0.15 * normal.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        images.push(Tensor3::new(h, w, c, data)?);
        labels.push(label);
    }
    LabeledSet::new(images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_is_balanced_and_seeded() {
        let a = separable_2d(200, 3).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 100);
        assert_eq!(a, separable_2d(200, 3).unwrap());
        assert_ne!(a, separable_2d(200, 4).unwrap());
        assert!(a.images().iter().all(|im| im.data().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn mixture_images_are_in_range() {
        let s = gaussian_mixture_images(30, (4, 5, 3), 3, 0).unwrap();
        assert_eq!(s.images()[0].dims(), (4, 5, 3));
        assert!(s.images().iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(s.labels()[..4], [0, 1, 2, 0]);
        assert!(gaussian_mixture_images(3, (2, 2, 1), 1, 0).is_err());
    }
}
