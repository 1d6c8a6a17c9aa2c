//! Normalized convolution and the standard convolution baseline.
//!
//! Both layers lower each sample with [`unfold`](crate::im2col::unfold) and
//! multiply by an `O x I` weight matrix. The normalized variant first
//! standardizes every column of the patch matrix over its `I` entries:
//!
//! ```text
//! x̂[i,k] = (x[i,k] - μ_k) / (σ_k + ε)      σ_k = population std of column k
//! y[o,k] = γ_o · Σ_i W[o,i] x̂[i,k] + β_o
//! ```
//!
//! Backward passes are exact chain-rule gradients of these maps, ε included.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::im2col::{fold_add_into, unfold_into, ConvGeometry, Im2ColMatrix};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{randn, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-column statistics of one patch matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStats<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    /// `sigma + eps`
    pub denom: Tensor<T>,
}

/// Standardize `cols` (`ii x k`, row-major) column by column into `out`.
/// Writes `mu`, `sigma`, `denom` (each length `k`).
fn standardize_into<T: Scalar>(
    cols: &[T],
    ii: usize,
    k: usize,
    eps: T,
    out: &mut [T],
    mu: &mut [T],
    sigma: &mut [T],
    denom: &mut [T],
) {
    let inv = T::one() / T::from_usize_lossy(ii);
    mu.fill(T::zero());
    for row in cols.chunks_exact(k) {
        for (m, &v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m *= inv);

    sigma.fill(T::zero());
    for (row, orow) in cols.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        for (((o, &v), &m), s) in orow.iter_mut().zip(row).zip(mu.iter()).zip(sigma.iter_mut()) {
            let d = v - m;
            *o = d;
            *s += d * d;
        }
    }
    for (s, d) in sigma.iter_mut().zip(denom.iter_mut()) {
        *s = (*s * inv).sqrt();
        *d = *s + eps;
    }
    for orow in out.chunks_exact_mut(k) {
        for (o, &d) in orow.iter_mut().zip(denom.iter()) {
            *o /= d;
        }
    }
}

/// Standardize each column of `m` to zero mean and (up to ε) unit
/// population standard deviation.
pub fn standardize_columns<T: Scalar>(
    m: &Im2ColMatrix<T>,
    eps: T,
) -> (Im2ColMatrix<T>, PatchStats<T>) {
    let (ii, k) = (m.patch_len(), m.positions());
    let mut out = vec![T::zero(); ii * k];
    let mut mu = vec![T::zero(); k];
    let mut sigma = vec![T::zero(); k];
    let mut denom = vec![T::zero(); k];
    standardize_into(m.data.data(), ii, k, eps, &mut out, &mut mu, &mut sigma, &mut denom);
    let t = |v| Tensor::new(&[k], v).expect("stat shape");
    (
        Im2ColMatrix {
            data: Tensor::new(&[ii, k], out).expect("xhat shape"),
            geometry: m.geometry,
        },
        PatchStats {
            mu: t(mu),
            sigma: t(sigma),
            denom: t(denom),
        },
    )
}

/// Gradient of a loss w.r.t. the raw columns given the gradient w.r.t. the
/// standardized columns. `gxhat` is overwritten with the result.
fn standardize_backward_in_place<T: Scalar>(
    gxhat: &mut [T],
    xhat: &[T],
    ii: usize,
    k: usize,
    sigma: &[T],
    denom: &[T],
) {
    let inv = T::one() / T::from_usize_lossy(ii);
    let mut gmean = vec![T::zero(); k];
    let mut proj = vec![T::zero(); k];
    for (grow, xrow) in gxhat.chunks_exact(k).zip(xhat.chunks_exact(k)) {
        for col in 0..k {
            gmean[col] += grow[col];
            proj[col] += grow[col] * xrow[col];
        }
    }
    // d/dx of x̂ = (x - μ)/(σ + ε):
    //   (g - mean(g)) / (σ + ε) - <g, x̂> x̂ / (I σ)
    // At σ = 0 the column is constant, x̂ = 0 and the second term vanishes.
    let mut coef = vec![T::zero(); k];
    for col in 0..k {
        gmean[col] *= inv;
        coef[col] = if sigma[col] > T::zero() {
            proj[col] * inv / sigma[col]
        } else {
            T::zero()
        };
    }
    for (grow, xrow) in gxhat.chunks_exact_mut(k).zip(xhat.chunks_exact(k)) {
        for col in 0..k {
            grow[col] = (grow[col] - gmean[col]) / denom[col] - coef[col] * xrow[col];
        }
    }
}

/// Weight initialization policy for convolution weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightInit {
    /// N(0, 1/I): unit output variance for standardized patches.
    #[default]
    FanIn,
    /// N(0, 2/I).
    He,
    /// N(0, std²).
    Normal { std: f64 },
}

impl WeightInit {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            WeightInit::FanIn => 1.0 / (fan_in as f64).sqrt(),
            WeightInit::He => (2.0 / fan_in as f64).sqrt(),
            WeightInit::Normal { std } => std,
        }
    }

    pub fn sample<T: Scalar>(self, rows: usize, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
        randn(&[rows, fan_in], rng, 0.0, self.std(fan_in))
    }
}

fn check_weights<T: Scalar>(g: &ConvGeometry, w: &Tensor<T>) -> Result<()> {
    let want = [g.out_channels, g.patch_len()];
    if w.shape() != want {
        return Err(Error::Dimension {
            op: "convolution weights",
            lhs: w.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

fn check_grad_out<T: Scalar>(g: &ConvGeometry, n: usize, gy: &Tensor<T>) -> Result<()> {
    let (oh, ow) = g.output();
    let want = [n, g.out_channels, oh, ow];
    if gy.shape() != want {
        return Err(Error::Dimension {
            op: "convolution output gradient",
            lhs: gy.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

struct NcCache<T> {
    batch: usize,
    /// `N x I x K`
    xhat: Vec<T>,
    /// `N x K` each
    sigma: Vec<T>,
    denom: Vec<T>,
    /// pre-affine output, `N x O x K`
    pre: Vec<T>,
}

/// Gradients returned by [`NcConv::backward`].
#[derive(Debug, Clone)]
pub struct NcGrads<T> {
    pub x: Tensor<T>,
    pub weights: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Normalized convolution layer with per-output-channel affine.
pub struct NcConv<T> {
    pub geometry: ConvGeometry,
    /// `O x I`, rows flattened in unfold order.
    pub weights: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: T,
    cache: Option<NcCache<T>>,
}

impl<T: Scalar> NcConv<T> {
    pub fn new(geometry: ConvGeometry, init: WeightInit, epsilon: f64, rng: &mut Rng) -> Result<Self> {
        geometry.validate()?;
        let weights = init.sample(geometry.out_channels, geometry.patch_len(), rng);
        Self::with_weights(geometry, weights, epsilon)
    }

    pub fn with_weights(geometry: ConvGeometry, weights: Tensor<T>, epsilon: f64) -> Result<Self> {
        geometry.validate()?;
        check_weights(&geometry, &weights)?;
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if geometry.patch_len() == 1 {
            log::warn!(
                "normalized convolution with patch length 1: every standardized patch is zero \
                 and the layer output reduces to beta"
            );
        }
        let o = geometry.out_channels;
        Ok(Self {
            geometry,
            weights,
            gamma: Tensor::full(&[o], T::one()),
            beta: Tensor::zeros(&[o]),
            epsilon: T::from_f64_lossy(epsilon),
            cache: None,
        })
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry;
        let n = g.check_input(x)?;
        check_weights(&g, &self.weights)?;
        let (ii, k, o) = (g.patch_len(), g.positions(), g.out_channels);
        let per = g.input_len();
        let (w, gamma, beta, eps) = (self.weights.data(), self.gamma.data(), self.beta.data(), self.epsilon);

        let mut xhat = vec![T::zero(); n * ii * k];
        let mut sigma = vec![T::zero(); n * k];
        let mut denom = vec![T::zero(); n * k];
        let mut pre = vec![T::zero(); n * o * k];
        let mut y = vec![T::zero(); n * o * k];

        x.data()
            .par_chunks(per.max(1))
            .zip(xhat.par_chunks_mut((ii * k).max(1)))
            .zip(sigma.par_chunks_mut(k))
            .zip(denom.par_chunks_mut(k))
            .zip(pre.par_chunks_mut(o * k))
            .zip(y.par_chunks_mut(o * k))
            .for_each(|(((((img, xh), sg), dn), z), ys)| {
                let mut cols = vec![T::zero(); ii * k];
                let mut mu = vec![T::zero(); k];
                unfold_into(img, &g, &mut cols);
                standardize_into(&cols, ii, k, eps, xh, &mut mu, sg, dn);
                gemm(false, false, o, k, ii, T::one(), w, xh, T::zero(), z);
                for ch in 0..o {
                    for (yv, &zv) in ys[ch * k..(ch + 1) * k].iter_mut().zip(&z[ch * k..(ch + 1) * k]) {
                        *yv = gamma[ch] * zv + beta[ch];
                    }
                }
            });

        self.cache = Some(NcCache {
            batch: n,
            xhat,
            sigma,
            denom,
            pre,
        });
        let (oh, ow) = g.output();
        Tensor::new(&[n, o, oh, ow], y)
    }

    /// Exact gradients for the most recent [`forward`](Self::forward).
    /// Consumes the cache.
    pub fn backward(&mut self, grad_y: &Tensor<T>) -> Result<NcGrads<T>> {
        let g = self.geometry;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("normalized conv backward called without a forward".into()))?;
        let n = cache.batch;
        check_grad_out(&g, n, grad_y)?;
        let (ii, k, o) = (g.patch_len(), g.positions(), g.out_channels);
        let per = g.input_len();
        let (w, gamma) = (self.weights.data(), self.gamma.data());

        let mut gx = vec![T::zero(); n * per];
        let partial: Vec<(Vec<T>, Vec<T>, Vec<T>)> = gx
            .par_chunks_mut(per.max(1))
            .enumerate()
            .map(|(s, gimg)| {
                let gy = &grad_y.data()[s * o * k..(s + 1) * o * k];
                let xh = &cache.xhat[s * ii * k..(s + 1) * ii * k];
                let z = &cache.pre[s * o * k..(s + 1) * o * k];
                let mut gz = vec![T::zero(); o * k];
                let mut ggamma = vec![T::zero(); o];
                let mut gbeta = vec![T::zero(); o];
                for ch in 0..o {
                    let row = ch * k..(ch + 1) * k;
                    for ((d, &gv), &zv) in gz[row.clone()].iter_mut().zip(&gy[row.clone()]).zip(&z[row]) {
                        *d = gamma[ch] * gv;
                        ggamma[ch] += gv * zv;
                        gbeta[ch] += gv;
                    }
                }
                let mut gw = vec![T::zero(); o * ii];
                gemm(false, true, o, ii, k, T::one(), &gz, xh, T::zero(), &mut gw);
                let mut gcols = vec![T::zero(); ii * k];
                gemm(true, false, ii, k, o, T::one(), w, &gz, T::zero(), &mut gcols);
                standardize_backward_in_place(
                    &mut gcols,
                    xh,
                    ii,
                    k,
                    &cache.sigma[s * k..(s + 1) * k],
                    &cache.denom[s * k..(s + 1) * k],
                );
                fold_add_into(&gcols, &g, gimg);
                (gw, ggamma, gbeta)
            })
            .collect();

        // Reduce in sample order so the result does not depend on threading.
        let mut gw = vec![T::zero(); o * ii];
        let mut ggamma = vec![T::zero(); o];
        let mut gbeta = vec![T::zero(); o];
        for (pw, pg, pb) in partial {
            add_into(&mut gw, &pw);
            add_into(&mut ggamma, &pg);
            add_into(&mut gbeta, &pb);
        }
        Ok(NcGrads {
            x: Tensor::new(&[n, g.in_channels, g.input.0, g.input.1], gx)?,
            weights: Tensor::new(&[o, ii], gw)?,
            gamma: Tensor::new(&[o], ggamma)?,
            beta: Tensor::new(&[o], gbeta)?,
        })
    }
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Gradients returned by [`Conv::backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub weights: Tensor<T>,
}

/// Standard bias-free convolution computed as im2col + GEMM.
pub struct Conv<T> {
    pub geometry: ConvGeometry,
    pub weights: Tensor<T>,
    /// `N x I x K` patch matrices of the last forward.
    cache: Option<(usize, Vec<T>)>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(geometry: ConvGeometry, init: WeightInit, rng: &mut Rng) -> Result<Self> {
        geometry.validate()?;
        let weights = init.sample(geometry.out_channels, geometry.patch_len(), rng);
        Self::with_weights(geometry, weights)
    }

    pub fn with_weights(geometry: ConvGeometry, weights: Tensor<T>) -> Result<Self> {
        geometry.validate()?;
        check_weights(&geometry, &weights)?;
        Ok(Self {
            geometry,
            weights,
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry;
        let n = g.check_input(x)?;
        check_weights(&g, &self.weights)?;
        let (ii, k, o) = (g.patch_len(), g.positions(), g.out_channels);
        let per = g.input_len();
        let w = self.weights.data();
        let mut cols = vec![T::zero(); n * ii * k];
        let mut y = vec![T::zero(); n * o * k];
        x.data()
            .par_chunks(per.max(1))
            .zip(cols.par_chunks_mut((ii * k).max(1)))
            .zip(y.par_chunks_mut(o * k))
            .for_each(|((img, c), ys)| {
                unfold_into(img, &g, c);
                gemm(false, false, o, k, ii, T::one(), w, c, T::zero(), ys);
            });
        self.cache = Some((n, cols));
        let (oh, ow) = g.output();
        Tensor::new(&[n, o, oh, ow], y)
    }

    pub fn backward(&mut self, grad_y: &Tensor<T>) -> Result<ConvGrads<T>> {
        let g = self.geometry;
        let (n, cols) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv backward called without a forward".into()))?;
        check_grad_out(&g, n, grad_y)?;
        let (ii, k, o) = (g.patch_len(), g.positions(), g.out_channels);
        let per = g.input_len();
        let w = self.weights.data();
        let mut gx = vec![T::zero(); n * per];
        let partial: Vec<Vec<T>> = gx
            .par_chunks_mut(per.max(1))
            .enumerate()
            .map(|(s, gimg)| {
                let gy = &grad_y.data()[s * o * k..(s + 1) * o * k];
                let c = &cols[s * ii * k..(s + 1) * ii * k];
                let mut gw = vec![T::zero(); o * ii];
                gemm(false, true, o, ii, k, T::one(), gy, c, T::zero(), &mut gw);
                let mut gcols = vec![T::zero(); ii * k];
                gemm(true, false, ii, k, o, T::one(), w, gy, T::zero(), &mut gcols);
                fold_add_into(&gcols, &g, gimg);
                gw
            })
            .collect();
        let mut gw = vec![T::zero(); o * ii];
        for p in partial {
            add_into(&mut gw, &p);
        }
        Ok(ConvGrads {
            x: Tensor::new(&[n, g.in_channels, g.input.0, g.input.1], gx)?,
            weights: Tensor::new(&[o, ii], gw)?,
        })
    }
}

/// Direct-loop convolution, used as the correctness reference for the
/// im2col path (benchmarks cross-check against it before timing).
pub fn naive_conv2d<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let n = g.check_input(x)?;
    check_weights(g, weights)?;
    let (h, w) = g.input;
    let (kh, kw) = g.kernel;
    let (oh, ow) = g.output();
    let c_in = g.in_channels;
    let mut y = Tensor::zeros(&[n, g.out_channels, oh, ow]);
    let xd = x.data();
    let wd = weights.data();
    let yd = y.data_mut();
    for s in 0..n {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for c in 0..c_in {
                        for i in 0..kh {
                            let iy = (oy * g.stride.0 + i) as isize - g.padding.0 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = (ox * g.stride.1 + j) as isize - g.padding.1 as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((s * c_in + c) * h + iy as usize) * w + ix as usize];
                                acc += wd[o * c_in * kh * kw + (c * kh + i) * kw + j] * xv;
                            }
                        }
                    }
                    yd[((s * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(y)
}
