//! Seeded synthetic datasets for tests and desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spread of each two-class blob.
pub const TWOCLASS_SIGMA: f64 = 0.06;
const TWOCLASS_CENTERS: [[f64; 2]; 2] = [[0.3, 0.3], [0.7, 0.7]];

/// Two Gaussian blobs in `[0, 1]^2`, separated by the line `x + y = 1`.
/// Samples closer than one sigma to that line, or outside the unit square,
/// are redrawn, so the classes are linearly separable with a margin of at
/// least `2 * TWOCLASS_SIGMA`. Sample `i` has label `i % 2`.
pub fn synth_twoclass(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::contract("two-class set needs at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TWOCLASS_SIGMA).expect("positive sigma");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let [cx, cy] = TWOCLASS_CENTERS[label];
        loop {
            let x = cx + noise.sample(&mut rng);
            let y = cy + noise.sample(&mut rng);
            let side = (x + y - 1.0) / std::f64::consts::SQRT_2;
            let inside = (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y);
            let correct = if label == 0 { side <= -TWOCLASS_SIGMA } else { side >= TWOCLASS_SIGMA };
            if inside && correct {
                data.extend([x as f32, y as f32]);
                break;
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(&[n, 2], data)?, labels, 2, "synth-twoclass")
}

/// `classes` Gaussian clusters in `[0, 1]^dim` with centers drawn from
/// `[0.2, 0.8]` and per-coordinate spread `sigma`, clipped to the unit cube.
pub fn synth_clusters(n: usize, dim: usize, classes: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 || !(sigma >= 0.0) {
        return Err(Error::contract("clusters need dim > 0, classes > 0 and sigma >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, sigma).expect("checked sigma");
    let mut data = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &label in &labels {
        data.extend(
            centers[label]
                .iter()
                .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
        );
    }
    Dataset::new(Tensor::new(&[n, dim], data)?, labels, classes, "synth-clusters")
}

/// Single-channel `size x size` images: each class has a blocky template
/// (4x4 cells of random intensity); samples are the template at a random
/// brightness plus pixel noise, clipped to `[0, 1]`.
pub fn synth_patterns(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || size < 4 {
        return Err(Error::contract("patterns need classes > 0 and size >= 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = size.div_ceil(4);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let cells: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            (0..size * size)
                .map(|p| cells[(p / size / cell) * 4 + (p % size) / cell])
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.25).expect("positive sigma");
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * size * size);
    for &label in &labels {
        let gain = rng.random_range(0.6..1.0);
        data.extend(
            templates[label]
                .iter()
                .map(|&t| (gain * t + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
        );
    }
    Dataset::new(Tensor::new(&[n, 1, size, size], data)?, labels, classes, "synth-patterns")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twoclass_is_reproducible_balanced_and_separated() {
        let a = synth_twoclass(100, 4).unwrap();
        let b = synth_twoclass(100, 4).unwrap();
        assert_eq!(a, b);
        let ones = a.labels.iter().filter(|&&l| l == 1).count();
        assert!(ones.abs_diff(50) <= 1);
        for (p, &l) in a.images.data().chunks(2).zip(&a.labels) {
            let side = (f64::from(p[0]) + f64::from(p[1]) - 1.0) / std::f64::consts::SQRT_2;
            assert!(if l == 1 { side > 0.9 * TWOCLASS_SIGMA } else { side < -0.9 * TWOCLASS_SIGMA });
        }
        assert!(synth_twoclass(1, 0).is_err());
    }

    #[test]
    fn generators_respect_bounds() {
        let c = synth_clusters(50, 8, 5, 0.3, 1).unwrap();
        assert_eq!(c.images.shape(), &[50, 8]);
        let p = synth_patterns(20, 4, 12, 2).unwrap();
        assert_eq!(p.images.shape(), &[20, 1, 12, 12]);
        assert_eq!(p.classes, 4);
    }
}
