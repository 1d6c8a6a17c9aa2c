//! Datasets, loaders, augmentation and batching.
//!
//! Images are kept in `[0, 1]` as `f32`. Per-channel standardization is
//! recorded on the dataset and applied when a batch is assembled, after
//! augmentation, so augmentation always sees raw pixel values.

mod augment;
mod cifar;
mod mnist;
mod synth;

pub use augment::{augment, flip_horizontal, shift_image, AugmentFlags};
pub use cifar::{load_cifar10, load_cifar10_with, write_cifar_batch, CIFAR_RECORDS_PER_FILE};
pub use mnist::{load_mnist_idx, write_idx_images, write_idx_labels};
pub use synth::{synth_classification, SynthOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `N x C x H x W`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub normalization: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be N x C x H x W".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label: bad,
                classes: class_count,
            });
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            class_count,
            normalization: None,
        })
    }

    pub fn empty(name: impl Into<String>, shape: (usize, usize, usize), class_count: usize) -> Self {
        Self {
            name: name.into(),
            images: Tensor::zeros(&[0, shape.0, shape.1, shape.2]),
            labels: vec![],
            class_count,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean and population std over the whole set.
    pub fn channel_stats(&self) -> ChannelStats {
        let (c, h, w) = self.image_shape();
        let hw = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for i in 0..self.len() {
            for (ch, plane) in self.image(i).chunks(hw.max(1)).enumerate() {
                for &v in plane {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * hw).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        ChannelStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn with_normalization(mut self, stats: Option<ChannelStats>) -> Self {
        self.normalization = stats;
        self
    }

    /// Copy of the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            name: self.name.clone(),
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("select shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        }
    }

    /// Assemble a batch: copy raw images, optionally augment, then apply the
    /// dataset's normalization and convert to the compute element type.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        augmentation: Option<(&mut Rng, AugmentFlags)>,
    ) -> (Tensor<T>, Vec<usize>) {
        let raw = self.select(indices);
        let mut images = raw.images;
        if let Some((rng, flags)) = augmentation {
            augment(&mut images, rng, flags);
        }
        let (_, h, w) = self.image_shape();
        let hw = h * w;
        let data: Vec<T> = match &self.normalization {
            None => images.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
            Some(stats) => {
                let c = stats.mean.len();
                images
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let ch = (j / hw.max(1)) % c;
                        T::from_f64_lossy(((v - stats.mean[ch]) / stats.std[ch]) as f64)
                    })
                    .collect()
            }
        };
        (
            Tensor::new(images.shape(), data).expect("batch shape"),
            raw.labels,
        )
    }
}

/// Exactly `n_per_class` samples of every class, chosen with `seed`, kept in
/// source order.
pub fn subset(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let mut per_class: Vec<Vec<usize>> = vec![vec![]; ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = Rng::new(seed);
    let mut chosen = Vec::with_capacity(n_per_class * ds.class_count);
    for (class, idx) in per_class.iter_mut().enumerate() {
        if idx.len() < n_per_class {
            return Err(Error::Config(format!(
                "subset wants {n_per_class} samples of class {class}, dataset has {}",
                idx.len()
            )));
        }
        rng.shuffle(idx);
        chosen.extend_from_slice(&idx[..n_per_class]);
    }
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}

/// Index batches over `0..len`, shuffled with `shuffle_seed` when given. The
/// final short batch is kept.
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

pub fn batches(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Batches {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Batches {
        order,
        batch_size,
        pos: 0,
    }
}
