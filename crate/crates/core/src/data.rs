//! Datasets: a seeded synthetic generator and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];
const IMAGE_LEN: usize = 3 * 32 * 32;

/// Images `[n, 3, 32, 32]` with values in `[0, 1]` and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(Error::shape(
                "dataset",
                &[labels.len(), 3, 32, 32],
                &[images.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// Normalized batch of the listed samples.
    pub fn batch(&self, idx: &[usize], norm: &Normalization) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * IMAGE_LEN);
        for &i in idx {
            for (c, plane) in self.image(i).chunks(32 * 32).enumerate() {
                data.extend(plane.iter().map(|v| (v - norm.mean[c]) / norm.std[c]));
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(&[idx.len(), 3, 32, 32], data).expect("batch shape"),
            labels,
        )
    }

    /// Samples `start..start + count`.
    pub fn subset(&self, start: usize, count: usize) -> Dataset {
        let end = (start + count).min(self.len());
        Dataset {
            images: self.images[start * IMAGE_LEN..end * IMAGE_LEN].to_vec(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Mini-batch index lists covering a shuffled pass. The order depends
    /// only on `(seed, epoch)`; a short final batch is kept.
    pub fn epoch_batches(&self, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch));
        order.shuffle(&mut rng);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

pub(crate) fn mix(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

/// Class prototypes built from a few coloured Gaussian blobs. Each sample
/// is its class prototype shifted by up to 3 pixels, with a random
/// brightness factor and pixel noise, clipped to `[0, 1]`. Sample `i` has
/// label `i % num_classes` and depends only on `(seed, i)`.
pub fn synthetic_blobs(n: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::arg("synthetic data needs at least two classes"));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
    let prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut img = vec![0.1; IMAGE_LEN];
            for _ in 0..3 {
                let cy = proto_rng.random_range(6.0..26.0);
                let cx = proto_rng.random_range(6.0..26.0);
                let sigma: f64 = proto_rng.random_range(2.5..5.0);
                let colour: [f64; 3] = std::array::from_fn(|_| proto_rng.random_range(0.0..0.8));
                for c in 0..3 {
                    for y in 0..32 {
                        for x in 0..32 {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[c * 1024 + y * 32 + x] += colour[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            img
        })
        .collect();
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
        let dy: i64 = rng.random_range(-3..=3);
        let dx: i64 = rng.random_range(-3..=3);
        let gain: f64 = rng.random_range(0.8..1.2);
        let proto = &prototypes[label];
        for c in 0..3 {
            for y in 0..32i64 {
                for x in 0..32i64 {
                    let (sy, sx) = ((y - dy).clamp(0, 31), (x - dx).clamp(0, 31));
                    let v = gain * proto[c * 1024 + (sy * 32 + sx) as usize] + noise.sample(&mut rng);
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(images, labels, num_classes)
}

/// Reads CIFAR-10 binary records (`1` label byte + `3072` pixel bytes)
/// from one file, keeping at most `limit` of them.
pub fn read_cifar10_file(path: &Path, limit: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    const RECORD: usize = 1 + IMAGE_LEN;
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of {RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks(RECORD).take(limit) {
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(images, labels, 10)
}

/// Train/test split from a CIFAR-10 binary directory
/// (`data_batch_{1..5}.bin`, `test_batch.bin`).
pub fn cifar10_binary(dir: &Path, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for b in 1..=5 {
        if labels.len() >= train {
            break;
        }
        let part = read_cifar10_file(&dir.join(format!("data_batch_{b}.bin")), train - labels.len())?;
        images.extend_from_slice(&part.images);
        labels.extend_from_slice(&part.labels);
    }
    let test = read_cifar10_file(&dir.join("test_batch.bin"), test)?;
    Ok((Dataset::new(images, labels, 10)?, test))
}
