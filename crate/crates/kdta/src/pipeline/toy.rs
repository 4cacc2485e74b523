//! Synthetic 8x8 image classes for CI-speed experiments.
//!
//! Class patterns are 2-pixel-wide bands (rows for classes 0..3,
//! columns for classes 4..7) plus seeded Gaussian noise, so the classes
//! stay linearly separable even after 2x2 pooling.

use rand_distr::{Distribution, Normal};

use crate::dataio::{Dataset, SplitTag};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const TOY_SIDE: usize = 8;
const MAX_CLASSES: usize = 8;
const DEFAULT_NOISE: f64 = 0.1;

/// The noiseless base pattern for one class.
pub fn toy_base_pattern(class: usize) -> Vec<f64> {
    let mut img = vec![0.0; TOY_SIDE * TOY_SIDE];
    if class < 4 {
        let r0 = 2 * class;
        for r in r0..r0 + 2 {
            for c in 0..TOY_SIDE {
                img[r * TOY_SIDE + c] = 1.0;
            }
        }
    } else {
        let c0 = 2 * (class - 4);
        for r in 0..TOY_SIDE {
            for c in c0..c0 + 2 {
                img[r * TOY_SIDE + c] = 1.0;
            }
        }
    }
    img
}

/// `n` single-channel 8x8 examples over `num_classes` classes with
/// noise sigma 0.1; class labels are assigned round-robin so per-class
/// counts differ by at most one.
pub fn make_toy_dataset(seed: u64, n: usize, num_classes: usize) -> Result<Dataset> {
    make_toy_dataset_with_noise(seed, n, num_classes, DEFAULT_NOISE)
}

/// As [`make_toy_dataset`] with an explicit noise level; sigma 0 gives
/// the exact base patterns.
pub fn make_toy_dataset_with_noise(
    seed: u64,
    n: usize,
    num_classes: usize,
    sigma: f64,
) -> Result<Dataset> {
    if num_classes < 2 || num_classes > MAX_CLASSES {
        return Err(Error::Domain(format!(
            "toy dataset supports 2..={MAX_CLASSES} classes, got {num_classes}"
        )));
    }
    if n < 10 * num_classes {
        return Err(Error::Domain(format!(
            "toy dataset needs at least 10 examples per class, got n={n} for {num_classes} classes"
        )));
    }
    if sigma < 0.0 {
        return Err(Error::Domain(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut rng = rng::rng_from(seed);
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).expect("finite positive sigma"))
    } else {
        None
    };
    let mut data = Vec::with_capacity(n * TOY_SIDE * TOY_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class);
        let base = toy_base_pattern(class);
        match &noise {
            Some(dist) => data.extend(base.iter().map(|&v| v + dist.sample(&mut rng))),
            None => data.extend_from_slice(&base),
        }
    }
    // keep classes mixed within batches
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let images = Tensor::from_vec(&[n, 1, TOY_SIDE, TOY_SIDE], data)?;
    let pre = Dataset::new(images, labels, num_classes, SplitTag::Train)?;
    Ok(pre.gather(&order, SplitTag::Train))
}

/// Classifies by nearest base pattern in squared distance; the check
/// that the noiseless generator is perfectly separable.
pub fn nearest_pattern_class(image: &[f64], num_classes: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..num_classes {
        let base = toy_base_pattern(c);
        let d: f64 = image.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_labels_are_stratified() {
        let data = make_toy_dataset(1, 100, 4).unwrap();
        for class in 0..4 {
            assert_eq!(data.labels.iter().filter(|&&l| l == class).count(), 25);
        }
    }

    #[test]
    fn noiseless_variant_is_perfectly_separable() {
        let data = make_toy_dataset_with_noise(2, 80, 4, 0.0).unwrap();
        let el = TOY_SIDE * TOY_SIDE;
        for i in 0..data.len() {
            let img = &data.images.data()[i * el..(i + 1) * el];
            assert_eq!(nearest_pattern_class(img, 4), data.labels[i]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_toy_dataset(9, 60, 3).unwrap();
        let b = make_toy_dataset(9, 60, 3).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn too_few_examples_is_domain_error() {
        assert!(make_toy_dataset(0, 30, 4).is_err());
        assert!(make_toy_dataset(0, 100, 9).is_err());
    }
}
