//! In-memory labelled image sets and seeded mini-batch iteration.

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::tensor::FeatureMap;

/// Per-channel normalization applied to pixel values in `[0, 1]`.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Images stored sample-major as `[C][H][W]`, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

/// One mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: FeatureMap,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Contract(format!(
                "{} values for {} samples of {per}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let samples: Vec<&[f32]> = indices.iter().map(|&i| self.sample(i)).collect();
        Batch {
            x: FeatureMap::from_samples(&samples, self.channels, self.height, self.width),
            y: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Sample order of `epoch`, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_for(seed, 0x5eed_0000 + epoch as u64));
        order
    }

    /// Shuffled batches for one epoch. The last partial batch is kept.
    pub fn shuffled_batches(&self, seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        self.epoch_order(seed, epoch)
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Batches in storage order, for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Hex SHA-256 of a batch order, for reproducibility checks.
pub fn order_hash(batches: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        for &i in b {
            h.update((i as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(1, 1, 2, 3, (0..10).map(|v| v as f32).collect(), vec![0, 1, 2, 0, 1]).unwrap()
    }

    #[test]
    fn batching_covers_every_sample_once() {
        let d = tiny();
        let batches = d.shuffled_batches(3, 0, 2);
        assert_eq!(batches.len(), 3);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(order_hash(&batches), order_hash(&d.shuffled_batches(3, 0, 2)));
    }

    #[test]
    fn gather_uses_channel_major_layout() {
        let d = tiny();
        let b = d.gather(&[4, 1]);
        assert_eq!(b.x.data, vec![8.0, 9.0, 2.0, 3.0]);
        assert_eq!(b.y, vec![1, 1]);
    }

    #[test]
    fn rejects_bad_labels_and_sizes() {
        assert!(Dataset::new(1, 1, 1, 2, vec![0.0], vec![2]).is_err());
        assert!(Dataset::new(1, 1, 2, 2, vec![0.0], vec![0]).is_err());
    }
}
