//! Central finite-difference checks of every analytic backward pass.
//!
//! Layer checks use the scalar probe `L = ⟨layer(x), R⟩` for a fixed random
//! `R`, so the upstream gradient is exactly `R`. Model checks use the mean
//! cross-entropy against random labels. All arithmetic is `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, ActivationKind};
use crate::conv::{Conv, NcConv, DEFAULT_EPSILON};
use crate::error::Result;
use crate::im2col::ConvGeometry;
use crate::network::{cross_entropy, LayerSpec, Model, ModelSpec};
use crate::norm::{GroupNorm, DEFAULT_GN_EPSILON};
use crate::rng::Rng;
use crate::tensor::{randn, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Randomized geometries per layer kind; the first eight conv cases
    /// always cover kernel {1, 3} x stride {1, 2} x padding {0, 1}.
    pub cases_per_kind: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: corrupt one analytic gradient so the suite must fail.
    pub fault_injection: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases_per_kind: 20,
            step: FD_STEP,
            tolerance: GRAD_TOLERANCE,
            fault_injection: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorError>,
    pub tolerance: f64,
    pub pass: bool,
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let sq = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = sq(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = sq(&mut analytic.iter().copied()).max(sq(&mut numeric.iter().copied()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Central differences of `loss` w.r.t. every entry of every input tensor.
pub fn numeric_grads(
    inputs: &[Tensor<f64>],
    step: f64,
    loss: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for j in 0..inputs[t].len() {
            let orig = inputs[t].data()[j];
            work[t].data_mut()[j] = orig + step;
            let plus = loss(&work)?;
            work[t].data_mut()[j] = orig - step;
            let minus = loss(&work)?;
            work[t].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compare analytic gradients against central differences.
pub fn compare(
    name: &str,
    names: &[&str],
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    loss: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<GradCheckCase> {
    let numeric = numeric_grads(inputs, cfg.step, loss)?;
    let tensors: Vec<TensorError> = names
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(n, (a, d))| TensorError {
            name: n.to_string(),
            rel_error: rel_error(a.data(), d.data()),
        })
        .collect();
    let max = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradCheckCase {
        name: name.to_string(),
        max_rel_error: max,
        tensors,
        tolerance: cfg.tolerance,
        pass: max <= cfg.tolerance,
    })
}

fn corrupt(grads: &mut [Tensor<f64>]) {
    let g = &mut grads[0];
    let v = g.data()[0];
    g.data_mut()[0] = v + 1e-3 * (1.0 + v.abs());
}

/// Conv geometry for case `index`: the first eight enumerate the kernel,
/// stride and padding grid, later ones are random. Patch length is at
/// least 4: with fewer entries a random column often has σ within a few
/// finite-difference steps of 0, where x̂ bends too sharply for central
/// differences to resolve.
pub fn case_geometry(index: usize, rng: &mut Rng) -> ConvGeometry {
    let (kernel, stride, padding) = if index < 8 {
        ([1, 3][index & 1], [1, 2][(index >> 1) & 1], [0, 1][(index >> 2) & 1])
    } else {
        ([1, 3][rng.below(2)], 1 + rng.below(2), rng.below(2))
    };
    let min_c = if kernel == 1 { 4 } else { 1 };
    let c = min_c + rng.below(3);
    let o = 1 + rng.below(3);
    let h = kernel.max(2) + rng.below(4);
    let w = kernel.max(2) + rng.below(4);
    ConvGeometry::square(c, o, kernel, stride, padding, (h, w)).expect("valid by construction")
}

fn describe(g: &ConvGeometry) -> String {
    format!(
        "C{} O{} k{} s{} p{} {}x{}",
        g.in_channels, g.out_channels, g.kernel.0, g.stride.0, g.padding.0, g.input.0, g.input.1
    )
}

fn nc_case(index: usize, cfg: &GradCheckConfig) -> Result<GradCheckCase> {
    let mut rng = Rng::with_stream(cfg.seed, 100 + index as u64);
    let g = case_geometry(index, &mut rng);
    let n = 2;
    let mut layer = NcConv::<f64>::new(g, Default::default(), DEFAULT_EPSILON, &mut rng)?;
    layer.gamma = randn(&[g.out_channels], &mut rng, 1.0, 0.5);
    layer.beta = randn(&[g.out_channels], &mut rng, 0.0, 0.5);
    let x = randn(&[n, g.in_channels, g.input.0, g.input.1], &mut rng, 0.3, 1.5);
    let y = layer.forward(&x)?;
    let r = randn(y.shape(), &mut rng, 0.0, 1.0);
    let gr = layer.backward(&r)?;
    let mut analytic = vec![gr.weights, gr.x, gr.gamma, gr.beta];
    if cfg.fault_injection && index == 0 {
        corrupt(&mut analytic);
    }
    let inputs = [layer.weights.clone(), x, layer.gamma.clone(), layer.beta.clone()];
    compare(
        &format!("nc_conv {}", describe(&g)),
        &["weights", "x", "gamma", "beta"],
        &inputs,
        &analytic,
        cfg,
        &|p| {
            let mut l = NcConv::with_weights(g, p[0].clone(), DEFAULT_EPSILON)?;
            l.gamma = p[2].clone();
            l.beta = p[3].clone();
            l.forward(&p[1])?.dot(&r)
        },
    )
}

fn conv_case(index: usize, cfg: &GradCheckConfig) -> Result<GradCheckCase> {
    let mut rng = Rng::with_stream(cfg.seed, 200 + index as u64);
    let g = case_geometry(index, &mut rng);
    let mut layer = Conv::<f64>::new(g, Default::default(), &mut rng)?;
    let x = randn(&[2, g.in_channels, g.input.0, g.input.1], &mut rng, 0.0, 1.0);
    let y = layer.forward(&x)?;
    let r = randn(y.shape(), &mut rng, 0.0, 1.0);
    let gr = layer.backward(&r)?;
    compare(
        &format!("conv {}", describe(&g)),
        &["weights", "x"],
        &[layer.weights.clone(), x],
        &[gr.weights, gr.x],
        cfg,
        &|p| Conv::with_weights(g, p[0].clone())?.forward(&p[1])?.dot(&r),
    )
}

fn gn_case(index: usize, cfg: &GradCheckConfig) -> Result<GradCheckCase> {
    let mut rng = Rng::with_stream(cfg.seed, 300 + index as u64);
    let c = [2, 4, 6][rng.below(3)];
    let divisors: Vec<usize> = (1..=c).filter(|d| c % d == 0).collect();
    // cycle through G = 1 (layer norm), G = C (instance norm) and the rest
    let groups = divisors[index % divisors.len()];
    // at least 4 values per group, for the same reason as in case_geometry
    let (h, w) = (2 + rng.below(3), 2 + rng.below(3));
    let mut layer = GroupNorm::<f64>::new(c, groups, DEFAULT_GN_EPSILON)?;
    layer.gamma = randn(&[c], &mut rng, 1.0, 0.5);
    layer.beta = randn(&[c], &mut rng, 0.0, 0.5);
    let x = randn(&[2, c, h, w], &mut rng, 0.5, 2.0);
    let y = layer.forward(&x)?;
    let r = randn(y.shape(), &mut rng, 0.0, 1.0);
    let gr = layer.backward(&r)?;
    compare(
        &format!("group_norm C{c} G{groups} {h}x{w}"),
        &["x", "gamma", "beta"],
        &[x, layer.gamma.clone(), layer.beta.clone()],
        &[gr.x, gr.gamma, gr.beta],
        cfg,
        &|p| {
            let mut l = GroupNorm::new(c, groups, DEFAULT_GN_EPSILON)?;
            l.gamma = p[1].clone();
            l.beta = p[2].clone();
            l.forward(&p[0])?.dot(&r)
        },
    )
}

fn activation_case(kind: ActivationKind, cfg: &GradCheckConfig) -> Result<GradCheckCase> {
    let mut rng = Rng::with_stream(cfg.seed, 400 + kind as u64);
    // keep inputs away from the kink at 0, where differences straddle it
    let x = randn::<f64>(&[3, 7], &mut rng, 0.0, 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let mut layer = Activation::new(kind);
    let y = layer.forward(&x);
    let r = randn(y.shape(), &mut rng, 0.0, 1.0);
    let gx = layer.backward(&r)?;
    compare(&format!("activation {kind:?}"), &["x"], &[x], &[gx], cfg, &|p| {
        Activation::new(kind).forward(&p[0]).dot(&r)
    })
}

fn model_case(index: usize, cfg: &GradCheckConfig) -> Result<GradCheckCase> {
    let mut rng = Rng::with_stream(cfg.seed, 500 + index as u64);
    let g = case_geometry(index, &mut rng);
    let classes = 3;
    let spec = ModelSpec {
        input: [g.in_channels, g.input.0, g.input.1],
        layers: vec![
            LayerSpec::NcConv {
                out_channels: g.out_channels,
                kernel: g.kernel.0,
                stride: g.stride.0,
                padding: g.padding.0,
                init: Default::default(),
                epsilon: None,
            },
            LayerSpec::Activation {
                kind: ActivationKind::Relu,
            },
            LayerSpec::Flatten,
            LayerSpec::Linear { out_features: classes },
        ],
    };
    let mut model = Model::<f64>::build(spec.clone(), &mut rng)?;
    // nonzero beta keeps the ReLU inputs away from exact zeros
    model.visit_params(&mut |name, v, _| {
        if name.ends_with("beta") {
            v.fill(0.1);
        }
    });
    // redraw inputs that put a ReLU input within reach of the difference
    // steps; the loss is not differentiable at the kink
    let mut x = randn(&[2, g.in_channels, g.input.0, g.input.1], &mut rng, 0.0, 1.0);
    for _ in 0..100 {
        let pre = model.nodes_mut()[0].forward(&x)?;
        if pre.data().iter().all(|v| v.abs() >= 1e-3) {
            break;
        }
        x = randn(x.shape(), &mut rng, 0.0, 1.0);
    }
    let labels: Vec<usize> = (0..2).map(|_| rng.below(classes)).collect();
    let logits = model.forward(&x)?;
    let (_, gl) = cross_entropy(&logits, &labels)?;
    let gx = model.backward(&gl)?;
    let params = model.params();
    let mut names: Vec<&str> = params.iter().map(|p| p.0.as_str()).collect();
    names.push("x");
    let mut inputs: Vec<Tensor<f64>> = params.iter().map(|p| p.1.clone()).collect();
    inputs.push(x);
    let mut analytic: Vec<Tensor<f64>> = model.grads().into_iter().map(|p| p.1).collect();
    analytic.push(gx);
    let model = std::sync::Mutex::new(model);
    compare(
        &format!("model nc->relu->linear {}", describe(&g)),
        &names,
        &inputs,
        &analytic,
        cfg,
        &|p| {
            let mut m = model.lock().expect("model lock");
            let mut it = p.iter();
            m.visit_params(&mut |_, v, _| *v = it.next().expect("param count").clone());
            let logits = m.forward(it.next().expect("input tensor"))?;
            Ok(cross_entropy(&logits, &labels)?.0)
        },
    )
}

/// Run every case. Results are ordered by kind, then case index.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckCase>> {
    #[derive(Clone, Copy)]
    enum Job {
        Nc(usize),
        Conv(usize),
        Gn(usize),
        Act(ActivationKind),
        Model(usize),
    }
    let n = cfg.cases_per_kind;
    let mut jobs = vec![];
    jobs.extend((0..n).map(Job::Nc));
    jobs.extend((0..n).map(Job::Conv));
    jobs.extend((0..n).map(Job::Gn));
    jobs.extend([ActivationKind::Relu, ActivationKind::Elu, ActivationKind::Selu].map(Job::Act));
    jobs.extend((0..n).map(Job::Model));
    jobs.par_iter()
        .map(|&job| match job {
            Job::Nc(i) => nc_case(i, cfg),
            Job::Conv(i) => conv_case(i, cfg),
            Job::Gn(i) => gn_case(i, cfg),
            Job::Act(k) => activation_case(k, cfg),
            Job::Model(i) => model_case(i, cfg),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_basics() {
        assert_eq!(rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(rel_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((rel_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((rel_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
    }

    #[test]
    fn numeric_grad_of_quadratic() {
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = numeric_grads(&[x], 1e-5, &|p| Ok(p[0].norm_sq())).unwrap();
        for (a, b) in g[0].data().iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn first_eight_geometries_cover_grid() {
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..8 {
            let g = case_geometry(i, &mut Rng::new(i as u64));
            assert!(g.patch_len() >= 4);
            seen.insert((g.kernel.0, g.stride.0, g.padding.0));
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn small_suite_passes_and_fault_is_caught() {
        let cfg = GradCheckConfig {
            cases_per_kind: 3,
            ..Default::default()
        };
        let cases = run_suite(&cfg).unwrap();
        assert_eq!(cases.len(), 3 * 4 + 3);
        for c in &cases {
            assert!(c.pass, "{c:?}");
        }
        let bad = run_suite(&GradCheckConfig {
            fault_injection: true,
            ..cfg
        })
        .unwrap();
        assert_eq!(bad.iter().filter(|c| !c.pass).count(), 1);
        assert!(!bad[0].pass);
    }
}
