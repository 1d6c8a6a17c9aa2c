//! Group normalization.
//!
//! Per sample, channels are split into `G` contiguous groups and each group
//! (`C/G * H * W` values) is standardized with its population mean and
//! variance, `(x - μ) / sqrt(var + ε)`, before a per-channel affine.
//! `G = 1` is LayerNorm over `C x H x W`; `G = C` is InstanceNorm.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_GN_EPSILON: f64 = 1e-5;

/// 32 groups when `channels` is divisible by 32, else the largest divisor of
/// `channels` not exceeding 32.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNormGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub struct GroupNorm<T> {
    pub num_groups: usize,
    pub channels: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: T,
    /// (input shape, x̂, 1/std per (sample, group))
    cache: Option<(Vec<usize>, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, num_groups: usize, epsilon: f64) -> Result<Self> {
        if num_groups == 0 || channels == 0 || !channels.is_multiple_of(num_groups) {
            return Err(Error::Config(format!(
                "group norm: {num_groups} groups do not divide {channels} channels"
            )));
        }
        Ok(Self {
            num_groups,
            channels,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            epsilon: T::from_f64_lossy(epsilon),
            cache: None,
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Dimension {
                op: "group norm input",
                lhs: s.to_vec(),
                rhs: vec![0, self.channels, 0, 0],
            });
        }
        Ok((s[0], s[2] * s[3]))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, hw) = self.check(x)?;
        let cpg = self.channels / self.num_groups;
        let glen = cpg * hw;
        let inv_len = T::one() / T::from_usize_lossy(glen.max(1));
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * self.num_groups];
        let mut y = vec![T::zero(); x.len()];
        let (gamma, beta) = (self.gamma.data(), self.beta.data());

        for (gi, ((src, xh), ys)) in x
            .data()
            .chunks(glen.max(1))
            .zip(xhat.chunks_mut(glen.max(1)))
            .zip(y.chunks_mut(glen.max(1)))
            .enumerate()
        {
            let mean = src.iter().copied().sum::<T>() * inv_len;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
            let is = T::one() / (var + self.epsilon).sqrt();
            inv_std[gi] = is;
            let g = gi % self.num_groups;
            for (j, ((&v, h), out)) in src.iter().zip(xh.iter_mut()).zip(ys.iter_mut()).enumerate() {
                let c = g * cpg + j / hw.max(1);
                *h = (v - mean) * is;
                *out = gamma[c] * *h + beta[c];
            }
        }
        self.cache = Some((x.shape().to_vec(), xhat, inv_std));
        Tensor::new(x.shape(), y)
    }

    pub fn backward(&mut self, grad_y: &Tensor<T>) -> Result<GroupNormGrads<T>> {
        let (shape, xhat, inv_std) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("group norm backward called without a forward".into()))?;
        if grad_y.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "group norm output gradient",
                lhs: grad_y.shape().to_vec(),
                rhs: shape,
            });
        }
        let hw = shape[2] * shape[3];
        let cpg = self.channels / self.num_groups;
        let glen = cpg * hw;
        let inv_len = T::one() / T::from_usize_lossy(glen.max(1));
        let gamma = self.gamma.data();
        let mut gx = vec![T::zero(); grad_y.len()];
        let mut ggamma = vec![T::zero(); self.channels];
        let mut gbeta = vec![T::zero(); self.channels];

        for (gi, ((gy, xh), out)) in grad_y
            .data()
            .chunks(glen.max(1))
            .zip(xhat.chunks(glen.max(1)))
            .zip(gx.chunks_mut(glen.max(1)))
            .enumerate()
        {
            let g = gi % self.num_groups;
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for (j, (&gv, &h)) in gy.iter().zip(xh).enumerate() {
                let c = g * cpg + j / hw.max(1);
                let gh = gv * gamma[c];
                mean_g += gh;
                mean_gx += gh * h;
                ggamma[c] += gv * h;
                gbeta[c] += gv;
            }
            mean_g *= inv_len;
            mean_gx *= inv_len;
            let is = inv_std[gi];
            for (j, ((o, &gv), &h)) in out.iter_mut().zip(gy).zip(xh).enumerate() {
                let c = g * cpg + j / hw.max(1);
                *o = is * (gv * gamma[c] - mean_g - h * mean_gx);
            }
        }
        Ok(GroupNormGrads {
            x: Tensor::new(&shape, gx)?,
            gamma: Tensor::new(&[self.channels], ggamma)?,
            beta: Tensor::new(&[self.channels], gbeta)?,
        })
    }
}
