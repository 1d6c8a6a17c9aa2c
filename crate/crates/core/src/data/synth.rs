use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    /// Pixel noise around the class prototype.
    pub noise: f64,
    /// Small noise so that classes are linearly separable.
    pub separable: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            noise: 0.2,
            separable: false,
        }
    }
}

/// Class-conditional Gaussian blobs: each class has a random prototype image
/// in `[0.2, 0.8]`; samples add i.i.d. noise and clamp to `[0, 1]`. Labels
/// cycle through the classes so every class is equally represented.
pub fn synth_classification(
    n: usize,
    classes: usize,
    shape: (usize, usize, usize),
    rng: &mut Rng,
    opts: SynthOptions,
) -> Result<Dataset> {
    let (c, h, w) = shape;
    let len = c * h * w;
    let noise = if opts.separable { opts.noise.min(0.05) } else { opts.noise };
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..len).map(|_| rng.uniform_range(0.2, 0.8)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes.max(1);
        labels.push(label);
        for &p in &prototypes[label] {
            data.push((p + noise * rng.normal()).clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new("synthetic", Tensor::new(&[n, c, h, w], data)?, labels, classes)
}
