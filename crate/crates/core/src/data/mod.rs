//! Datasets, file formats and synthetic fixtures.

pub mod checkpoint;
pub mod idx;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use synth::{synth_clusters, synth_patterns, synth_twoclass};

/// Images (analog values in `[0, 1]`) with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, ...sample_shape]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize], split: impl Into<String>) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            split: split.into(),
        })
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows, self.split.clone())
    }

    /// Seeded random split into `(train, validation)` with `fraction` of the
    /// samples held out.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::contract(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (val, train) = rows.split_at(held);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train, "train")?, self.subset(&val, "validation")?))
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.gather_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        })
    }

    /// Batches in storage order; the last one may be short.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batches_from(rows, batch_size)
    }

    /// Batches in an order fixed by `seed`.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64) -> impl Iterator<Item = Batch> + '_ {
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.batches_from(rows, batch_size)
    }

    fn batches_from(&self, rows: Vec<usize>, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = batch_size.max(1);
        (0..rows.len().div_ceil(size)).map(move |b| {
            let chunk = &rows[b * size..((b + 1) * size).min(rows.len())];
            self.batch(chunk).expect("rows in range")
        })
    }

    /// Flatten each sample to a vector (for dense-only networks).
    pub fn flattened(&self) -> Self {
        let n = self.len();
        let d = self.sample_shape().iter().product();
        Self {
            images: self.images.clone().reshape(&[n, d]).expect("same element count"),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let images = Tensor::from_f64(&[5, 2], &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        Dataset::new(images, vec![0, 1, 0, 1, 0], 2, "toy").unwrap()
    }

    #[test]
    fn rejects_inconsistent_construction() {
        let images = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(images.clone(), vec![0], 2, "x").is_err());
        assert!(Dataset::new(images.clone(), vec![0, 2], 2, "x").is_err());
        assert!(Dataset::new(Tensor::full(&[2, 3], 1.5), vec![0, 1], 2, "x").is_err());
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let d = toy();
        let batches: Vec<_> = d.sequential_batches(2).collect();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].labels, vec![0]);
        let mut seen: Vec<usize> = d
            .shuffled_batches(2, 9)
            .flat_map(|b| b.images.data().chunks(2).map(|c| (c[0] * 5.0).round() as usize).collect::<Vec<_>>())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn shuffle_order_is_reproducible() {
        let d = toy();
        let a: Vec<_> = d.shuffled_batches(2, 3).map(|b| b.labels).collect();
        let b: Vec<_> = d.shuffled_batches(2, 3).map(|b| b.labels).collect();
        assert_eq!(a, b);
        let (train, val) = d.split_validation(0.4, 1).unwrap();
        assert_eq!((train.len(), val.len()), (3, 2));
    }
}
