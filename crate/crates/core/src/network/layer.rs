//! Layer nodes composing a model.

use crate::activation::Activation;
use crate::conv::{Conv, NcConv};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::norm::GroupNorm;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{randn, Tensor};

/// Fully connected layer on `N x F` inputs.
pub struct Linear<T> {
    /// `O x F`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Self {
            weights: randn(&[out_features, in_features], rng, 0.0, 1.0 / (in_features.max(1) as f64).sqrt()),
            bias: Tensor::zeros(&[out_features]),
            cache: None,
        }
    }

    pub fn with_weights(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weights,
            bias,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (o, f) = (self.weights.shape()[0], self.weights.shape()[1]);
        if x.rank() != 2 || x.shape()[1] != f {
            return Err(Error::Dimension {
                op: "linear input",
                lhs: x.shape().to_vec(),
                rhs: vec![0, f],
            });
        }
        let n = x.shape()[0];
        let mut y = vec![T::zero(); n * o];
        for row in y.chunks_exact_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(false, true, n, o, f, T::one(), x.data(), self.weights.data(), T::one(), &mut y);
        self.cache = Some(x.clone());
        Tensor::new(&[n, o], y)
    }

    /// Returns `(grad_x, grad_w, grad_b)`.
    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("linear backward called without a forward".into()))?;
        let (o, f) = (self.weights.shape()[0], self.weights.shape()[1]);
        let n = x.shape()[0];
        if gy.shape() != [n, o] {
            return Err(Error::Dimension {
                op: "linear output gradient",
                lhs: gy.shape().to_vec(),
                rhs: vec![n, o],
            });
        }
        let mut gw = vec![T::zero(); o * f];
        gemm(true, false, o, f, n, T::one(), gy.data(), x.data(), T::zero(), &mut gw);
        let mut gx = vec![T::zero(); n * f];
        gemm(false, false, n, f, o, T::one(), gy.data(), self.weights.data(), T::zero(), &mut gx);
        let mut gb = vec![T::zero(); o];
        for row in gy.data().chunks_exact(o) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        Ok((Tensor::new(&[n, f], gx)?, Tensor::new(&[o, f], gw)?, Tensor::new(&[o], gb)?))
    }
}

/// Residual block: `main(x) + shortcut(x)`; an empty shortcut is identity.
pub struct Residual<T> {
    pub main: Vec<Node<T>>,
    pub shortcut: Vec<Node<T>>,
}

pub enum Op<T> {
    NcConv(NcConv<T>),
    Conv(Conv<T>),
    GroupNorm(GroupNorm<T>),
    Activation(Activation<T>),
    Linear(Linear<T>),
    GlobalAvgPool { input: Option<Vec<usize>> },
    Flatten { input: Option<Vec<usize>> },
    Residual(Residual<T>),
}

/// A layer plus the parameter gradients from its last backward pass.
pub struct Node<T> {
    pub op: Op<T>,
    grads: Vec<Tensor<T>>,
    /// `||dL/dx||` at this layer's input from the last backward (conv layers).
    pub input_grad_norm: Option<f64>,
}

impl<T: Scalar> Node<T> {
    pub fn new(op: Op<T>) -> Self {
        let mut node = Self {
            op,
            grads: vec![],
            input_grad_norm: None,
        };
        node.grads = node.op.own_params().iter().map(|p| Tensor::zeros(p.1.shape())).collect();
        node
    }

    pub fn kind(&self) -> &'static str {
        match &self.op {
            Op::NcConv(_) => "nc_conv",
            Op::Conv(_) => "conv",
            Op::GroupNorm(_) => "group_norm",
            Op::Activation(_) => "activation",
            Op::Linear(_) => "linear",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Flatten { .. } => "flatten",
            Op::Residual(_) => "residual",
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &mut self.op {
            Op::NcConv(l) => l.forward(x),
            Op::Conv(l) => l.forward(x),
            Op::GroupNorm(l) => l.forward(x),
            Op::Activation(l) => Ok(l.forward(x)),
            Op::Linear(l) => l.forward(x),
            Op::GlobalAvgPool { input } => {
                let s = x.shape();
                if s.len() != 4 {
                    return Err(Error::Shape {
                        shape: s.to_vec(),
                        reason: "global average pool expects N x C x H x W".into(),
                    });
                }
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize_lossy(hw.max(1));
                let data = x.data().chunks(hw.max(1)).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                *input = Some(s.to_vec());
                Tensor::new(&[s[0], s[1]], data)
            }
            Op::Flatten { input } => {
                let s = x.shape().to_vec();
                if s.is_empty() {
                    return Err(Error::Shape {
                        shape: s,
                        reason: "flatten needs a batch axis".into(),
                    });
                }
                *input = Some(s.clone());
                let f = s[1..].iter().product();
                x.clone().reshape(&[s[0], f])
            }
            Op::Residual(block) => {
                let mut a = x.clone();
                for n in &mut block.main {
                    a = n.forward(&a)?;
                }
                let mut b = x.clone();
                for n in &mut block.shortcut {
                    b = n.forward(&b)?;
                }
                a.add(&b)
            }
        }
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let gx = match &mut self.op {
            Op::NcConv(l) => {
                let g = l.backward(gy)?;
                self.grads = vec![g.weights, g.gamma, g.beta];
                g.x
            }
            Op::Conv(l) => {
                let g = l.backward(gy)?;
                self.grads = vec![g.weights];
                g.x
            }
            Op::GroupNorm(l) => {
                let g = l.backward(gy)?;
                self.grads = vec![g.gamma, g.beta];
                g.x
            }
            Op::Activation(l) => l.backward(gy)?,
            Op::Linear(l) => {
                let (gx, gw, gb) = l.backward(gy)?;
                self.grads = vec![gw, gb];
                gx
            }
            Op::GlobalAvgPool { input } => {
                let s = input
                    .take()
                    .ok_or_else(|| Error::State("pool backward called without a forward".into()))?;
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize_lossy(hw.max(1));
                let mut out = Vec::with_capacity(s.iter().product());
                for &g in gy.data() {
                    out.extend(std::iter::repeat_n(g * inv, hw));
                }
                Tensor::new(&s, out)?
            }
            Op::Flatten { input } => {
                let s = input
                    .take()
                    .ok_or_else(|| Error::State("flatten backward called without a forward".into()))?;
                gy.clone().reshape(&s)?
            }
            Op::Residual(block) => {
                let mut a = gy.clone();
                for n in block.main.iter_mut().rev() {
                    a = n.backward(&a)?;
                }
                let mut b = gy.clone();
                for n in block.shortcut.iter_mut().rev() {
                    b = n.backward(&b)?;
                }
                a.add(&b)?
            }
        };
        if matches!(self.op, Op::NcConv(_) | Op::Conv(_)) {
            self.input_grad_norm = Some(gx.norm_sq().to_f64_lossy().sqrt());
        }
        Ok(gx)
    }

    /// Visit `(name, value, grad)` for every parameter, depth first.
    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, &Tensor<T>)) {
        if let Op::Residual(block) = &mut self.op {
            for (i, n) in block.main.iter_mut().enumerate() {
                n.visit_params(&format!("{prefix}.main.{i}"), f);
            }
            for (i, n) in block.shortcut.iter_mut().enumerate() {
                n.visit_params(&format!("{prefix}.shortcut.{i}"), f);
            }
            return;
        }
        let kind = self.kind();
        let grads = &self.grads;
        for ((name, value), grad) in self.op.own_params_mut().into_iter().zip(grads) {
            f(&format!("{prefix}.{kind}.{name}"), value, grad);
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.op {
            Op::Residual(block) => block.main.iter().chain(&block.shortcut).map(Node::param_count).sum(),
            op => op.own_params().iter().map(|p| p.1.len()).sum(),
        }
    }

    pub fn collect_input_grad_norms(&self, out: &mut Vec<f64>) {
        match &self.op {
            Op::Residual(block) => {
                for n in block.main.iter().chain(&block.shortcut) {
                    n.collect_input_grad_norms(out);
                }
            }
            Op::NcConv(_) | Op::Conv(_) => out.push(self.input_grad_norm.unwrap_or(f64::NAN)),
            _ => {}
        }
    }
}

impl<T: Scalar> Op<T> {
    fn own_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Op::NcConv(l) => vec![("weights", &l.weights), ("gamma", &l.gamma), ("beta", &l.beta)],
            Op::Conv(l) => vec![("weights", &l.weights)],
            Op::GroupNorm(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            Op::Linear(l) => vec![("weights", &l.weights), ("bias", &l.bias)],
            _ => vec![],
        }
    }

    fn own_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Op::NcConv(l) => vec![("weights", &mut l.weights), ("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            Op::Conv(l) => vec![("weights", &mut l.weights)],
            Op::GroupNorm(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            Op::Linear(l) => vec![("weights", &mut l.weights), ("bias", &mut l.bias)],
            _ => vec![],
        }
    }
}
