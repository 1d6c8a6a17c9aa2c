//! Numerical checks of the gradient-norm identities for per-column
//! standardization, the output normality probe, and an observational
//! gradient-norm trace comparing normalized and plain convolution models.
//!
//! The identity checks work on isolated column vectors in `f64` with ε = 0.
//! Every gradient on the left-hand side is computed through an explicit
//! Jacobian matrix, independent of the closed forms on the right.
//!
//! Centering `ẋ = x - mean(x)`, with `g = ∇_ẋ L`:
//!
//! ```text
//! ‖∇_x L‖² = ‖g‖² - (1/I)⟨1, g⟩²
//! ```
//!
//! Scaling `x̂ = ẋ/σ`, with `g = ∇_x̂ L`:
//!
//! ```text
//! ‖∇_ẋ L‖² = (1/σ²)(‖g‖² + (1/I²)⟨x̂, g⟩²(⟨x̂, x̂⟩ - 2I))
//! ```
//!
//! Reports also carry the gap to the same bracket with a leading `1/σ`.

use std::path::Path;

use rand_distr::{Distribution, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{standardize_columns, DEFAULT_EPSILON};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::im2col::{unfold, ConvGeometry};
use crate::network::{cross_entropy, Model, Sgd};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
/// Columns with σ below this are rejected by the scaling check.
pub const MIN_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub index: usize,
    pub patch_len: usize,
    pub seed: u64,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub identity: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub instance: InstanceInfo,
    /// Scaling identity only: gap against the `1/σ` variant.
    pub printed_form_gap: Option<f64>,
    /// Scaling identity only: `‖x̂‖²` relative to `I`.
    pub xhat_norm_gap: Option<f64>,
    /// Scaling identity only: `-(1/I)⟨x̂, g⟩²`.
    pub reduction_term: Option<f64>,
}

/// `|a - b|` relative to `scale`; zero when both sides vanish.
fn rel_gap(a: f64, b: f64, scale: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / scale.max(a.abs()).max(b.abs()).max(f64::MIN_POSITIVE)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn column(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len(), 1], v.to_vec()).expect("column shape")
}

/// `Jᵀ g` for an explicit `I x I` Jacobian.
fn pull_back(jacobian: &Tensor<f64>, g: &[f64]) -> Vec<f64> {
    let i = g.len();
    let mut jt = Tensor::zeros(&[i, i]);
    for r in 0..i {
        for c in 0..i {
            jt.set(&[c, r], jacobian.get(&[r, c]));
        }
    }
    matmul(&jt, &column(g)).expect("square jacobian").into_data()
}

/// Check the centering identity for a raw column `x` and downstream
/// gradient `g` w.r.t. the centered column.
pub fn verify_centering_identity(x: &[f64], g: &[f64], info: InstanceInfo) -> IdentityReport {
    assert_eq!(x.len(), g.len());
    let i = x.len();
    // ∂ẋ_r/∂x_c = δ_rc - 1/I
    let inv = 1.0 / i as f64;
    let mut p = Tensor::<f64>::eye(i);
    p.data_mut().iter_mut().for_each(|v| *v -= inv);
    let grad_x = pull_back(&p, g);
    let lhs = dot(&grad_x, &grad_x);
    let gg = dot(g, g);
    let s: f64 = g.iter().sum();
    let rhs = gg - s * s * inv;
    let gap = rel_gap(lhs, rhs, gg);
    IdentityReport {
        identity: "centering".into(),
        lhs,
        rhs,
        gap,
        tolerance: IDENTITY_TOLERANCE,
        pass: gap <= IDENTITY_TOLERANCE,
        instance: info,
        printed_form_gap: None,
        xhat_norm_gap: None,
        reduction_term: None,
    }
}

/// Check the scaling identity for a centered column `xdot` and downstream
/// gradient `g` w.r.t. `x̂ = ẋ/σ`.
pub fn verify_scaling_identity(xdot: &[f64], g: &[f64], mut info: InstanceInfo) -> Result<IdentityReport> {
    assert_eq!(xdot.len(), g.len());
    let i = xdot.len();
    let fi = i as f64;
    let sigma = (dot(xdot, xdot) / fi).sqrt();
    if !(sigma >= MIN_SIGMA) {
        return Err(Error::Degenerate(format!(
            "column standard deviation {sigma:e} below {MIN_SIGMA:e}"
        )));
    }
    info.sigma = Some(sigma);
    let xhat: Vec<f64> = xdot.iter().map(|v| v / sigma).collect();
    // ∂x̂_r/∂ẋ_c = δ_rc/σ - ẋ_r ẋ_c/(I σ³)
    let mut jac = Tensor::<f64>::zeros(&[i, i]);
    for r in 0..i {
        for c in 0..i {
            let delta = if r == c { 1.0 / sigma } else { 0.0 };
            jac.set(&[r, c], delta - xdot[r] * xdot[c] / (fi * sigma.powi(3)));
        }
    }
    let grad = pull_back(&jac, g);
    let lhs = dot(&grad, &grad);
    let gg = dot(g, g);
    let proj = dot(&xhat, g);
    let xx = dot(&xhat, &xhat);
    let bracket = gg + proj * proj * (xx - 2.0 * fi) / (fi * fi);
    let rhs = bracket / (sigma * sigma);
    let printed = bracket / sigma;
    let scale = gg / (sigma * sigma);
    let gap = rel_gap(lhs, rhs, scale);
    let xhat_norm_gap = (xx - fi).abs() / fi;
    Ok(IdentityReport {
        identity: "scaling".into(),
        lhs,
        rhs,
        gap,
        tolerance: IDENTITY_TOLERANCE,
        pass: gap <= IDENTITY_TOLERANCE && xhat_norm_gap <= 1e-9,
        instance: info,
        printed_form_gap: Some(rel_gap(lhs, printed, scale)),
        xhat_norm_gap: Some(xhat_norm_gap),
        reduction_term: Some(-proj * proj / fi),
    })
}

/// Random raw column, its centered version and a downstream gradient.
/// The column scale is drawn log-uniformly in `[0.1, 10]` so σ varies widely.
pub fn random_instance(patch_len: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 10f64.powf(rng.uniform_range(-1.0, 1.0));
    let shift = rng.uniform_range(-3.0, 3.0);
    let x: Vec<f64> = (0..patch_len).map(|_| shift + scale * rng.normal()).collect();
    let mean = x.iter().sum::<f64>() / patch_len as f64;
    let xdot = x.iter().map(|v| v - mean).collect();
    let g = (0..patch_len).map(|_| rng.normal() + 0.5).collect();
    (x, xdot, g)
}

/// `count` random instances per patch length, both identities each,
/// ordered by (patch length, instance index) regardless of scheduling.
pub fn identity_suite(patch_lens: &[usize], count: usize, seed: u64) -> Result<Vec<IdentityReport>> {
    let jobs: Vec<(usize, usize)> = patch_lens
        .iter()
        .flat_map(|&i| (0..count).map(move |k| (i, k)))
        .collect();
    let reports: Vec<Result<[IdentityReport; 2]>> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let mut rng = Rng::with_stream(seed, (i * 1_000_003 + k) as u64);
            let (x, xdot, g) = random_instance(i, &mut rng);
            let info = InstanceInfo {
                index: k,
                patch_len: i,
                seed,
                sigma: None,
            };
            Ok([
                verify_centering_identity(&x, &g, info.clone()),
                verify_scaling_identity(&xdot, &g, info)?,
            ])
        })
        .collect();
    let mut out = Vec::with_capacity(2 * jobs.len());
    for r in reports {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    Gaussian,
    Uniform,
    /// Student t with 3 degrees of freedom.
    HeavyTailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeWeights {
    /// Fresh `N(0, 1/I)` weights for every patch.
    Gaussian,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub patch_len: usize,
    pub samples: usize,
    pub input: InputDistribution,
    pub weights: ProbeWeights,
    pub mean: f64,
    pub variance: f64,
    pub excess_kurtosis: f64,
    /// `4/√n`
    pub mean_bound: f64,
    pub mean_ok: bool,
    pub variance_ok: bool,
    /// Bounds are only enforced for `I >= 27` and `n >= 10⁴`.
    pub bounds_apply: bool,
    /// `I = 1`: every standardized patch is zero.
    pub degenerate: bool,
}

impl NormalityReport {
    pub fn pass(&self) -> bool {
        !self.bounds_apply || (self.mean_ok && self.variance_ok)
    }
}

/// Standardize random patches of length `geometry.patch_len()` and dot each
/// with a weight vector; summarize the resulting pre-activation outputs.
pub fn check_output_normality(
    geometry: &ConvGeometry,
    samples: usize,
    input: InputDistribution,
    weights: ProbeWeights,
    rng: &mut Rng,
) -> Result<NormalityReport> {
    let i = geometry.patch_len();
    if samples == 0 {
        return Err(Error::Config("normality probe needs at least one sample".into()));
    }
    // lay the patches out as an I-channel 1 x n image so a 1x1 unfold gives
    // exactly the I x n patch matrix
    let lowering = ConvGeometry::new(i, 1, (1, 1), (1, 1), (0, 0), (1, samples))?;
    let t = StudentT::new(3.0).expect("valid dof");
    let raw: Vec<f64> = (0..i * samples)
        .map(|_| match input {
            InputDistribution::Gaussian => rng.normal(),
            InputDistribution::Uniform => rng.uniform(),
            InputDistribution::HeavyTailed => t.sample(rng),
        })
        .collect();
    let image = Tensor::new(&[1, i, 1, samples], raw)?;
    let cols = unfold(&image, &lowering)?.remove(0);
    let (xhat, _) = standardize_columns(&cols, DEFAULT_EPSILON);
    let std = 1.0 / (i as f64).sqrt();
    let xd = xhat.data.data();
    let outputs: Vec<f64> = (0..samples)
        .map(|k| match weights {
            ProbeWeights::Zero => 0.0,
            ProbeWeights::Gaussian => (0..i).map(|r| std * rng.normal() * xd[r * samples + k]).sum(),
        })
        .collect();
    let n = samples as f64;
    let mean = outputs.iter().sum::<f64>() / n;
    let m2 = outputs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = outputs.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let excess_kurtosis = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { f64::NAN };
    let mean_bound = 4.0 / n.sqrt();
    let degenerate = i == 1;
    if degenerate {
        log::warn!("normality probe with patch length 1: standardized patches are all zero");
    }
    Ok(NormalityReport {
        patch_len: i,
        samples,
        input,
        weights,
        mean,
        variance: m2,
        excess_kurtosis,
        mean_bound,
        mean_ok: mean.abs() < mean_bound,
        variance_ok: (0.9..=1.1).contains(&m2),
        bounds_apply: i >= 27 && samples >= 10_000 && weights == ProbeWeights::Gaussian,
        degenerate,
    })
}

/// One row of the gradient-norm trace: one model, one step, one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub model: String,
    pub step: usize,
    pub loss: f64,
    /// `|L(w_{t+1}; B_t) - L(w_t; B_t)|` on the step's own batch.
    pub loss_change: f64,
    pub layer: usize,
    pub input_grad_norm: f64,
}

/// Train each model for `steps` SGD steps on the same batch sequence and
/// record conv-input gradient norms and per-step loss changes.
///
/// Observational: nothing here passes or fails.
pub fn measure_grad_norm_reduction<T: Scalar>(
    models: &mut [(&str, &mut Model<T>)],
    data: &Dataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Config("trace needs data and a positive batch size".into()));
    }
    let mut order_rng = Rng::new(seed);
    let picks: Vec<Vec<usize>> = (0..steps)
        .map(|_| (0..batch_size).map(|_| order_rng.below(data.len())).collect())
        .collect();
    let mut rows = vec![];
    for (name, model) in models.iter_mut() {
        let mut sgd = Sgd::new(0.0, 0.0);
        for (step, idx) in picks.iter().enumerate() {
            let (x, labels) = data.batch::<T>(idx, None);
            let logits = model.forward(&x)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            model.backward(&grad)?;
            let norms = model.conv_input_grad_norms();
            sgd.step(model, lr);
            let after = cross_entropy(&model.forward(&x)?, &labels)?.0;
            let (loss, after) = (loss.to_f64_lossy(), after.to_f64_lossy());
            for (layer, g) in norms.into_iter().enumerate() {
                rows.push(TraceRow {
                    model: name.to_string(),
                    step,
                    loss,
                    loss_change: (after - loss).abs(),
                    layer,
                    input_grad_norm: g,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
