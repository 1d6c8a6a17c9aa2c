use crate::activation::Activation;
use crate::conv::{Conv, NcConv, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::im2col::ConvGeometry;
use crate::norm::{default_groups, GroupNorm, DEFAULT_GN_EPSILON};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::layer::{Linear, Node, Op, Residual};
use super::spec::{layer_output, FeatureShape, LayerSpec, ModelSpec};

/// A sequential stack of layers built from a [`ModelSpec`].
pub struct Model<T> {
    pub spec: ModelSpec,
    nodes: Vec<Node<T>>,
}

fn build_node<T: Scalar>(layer: &LayerSpec, input: FeatureShape, rng: &mut Rng) -> std::result::Result<Node<T>, String> {
    let image = || match input {
        FeatureShape::Image(c, h, w) => (c, h, w),
        FeatureShape::Flat(_) => unreachable!("shape checked before build"),
    };
    let op = match layer {
        LayerSpec::NcConv {
            out_channels,
            kernel,
            stride,
            padding,
            init,
            epsilon,
        } => {
            let (c, h, w) = image();
            let g = ConvGeometry::square(c, *out_channels, *kernel, *stride, *padding, (h, w)).map_err(|e| e.to_string())?;
            Op::NcConv(NcConv::new(g, *init, epsilon.unwrap_or(DEFAULT_EPSILON), rng).map_err(|e| e.to_string())?)
        }
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            init,
        } => {
            let (c, h, w) = image();
            let g = ConvGeometry::square(c, *out_channels, *kernel, *stride, *padding, (h, w)).map_err(|e| e.to_string())?;
            Op::Conv(Conv::new(g, *init, rng).map_err(|e| e.to_string())?)
        }
        LayerSpec::GroupNorm { groups, epsilon } => {
            let (c, _, _) = image();
            let g = groups.unwrap_or_else(|| default_groups(c));
            Op::GroupNorm(GroupNorm::new(c, g, epsilon.unwrap_or(DEFAULT_GN_EPSILON)).map_err(|e| e.to_string())?)
        }
        LayerSpec::Activation { kind } => Op::Activation(Activation::new(*kind)),
        LayerSpec::GlobalAvgPool => Op::GlobalAvgPool { input: None },
        LayerSpec::Flatten => Op::Flatten { input: None },
        LayerSpec::Linear { out_features } => {
            let f = input.dims().iter().product();
            Op::Linear(Linear::new(f, *out_features, rng))
        }
        LayerSpec::Residual { main, shortcut } => {
            let branch = |layers: &[LayerSpec], rng: &mut Rng| -> std::result::Result<Vec<Node<T>>, String> {
                let mut shape = input;
                let mut nodes = vec![];
                for l in layers {
                    nodes.push(build_node(l, shape, rng)?);
                    shape = layer_output(l, shape)?;
                }
                Ok(nodes)
            };
            let main = branch(main, rng)?;
            let shortcut = branch(shortcut, rng)?;
            Op::Residual(Residual { main, shortcut })
        }
    };
    Ok(Node::new(op))
}

impl<T: Scalar> Model<T> {
    /// Shape-check `spec` and initialize every parameter from `rng`, layer
    /// by layer in spec order.
    pub fn build(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut nodes = Vec::with_capacity(spec.layers.len());
        for (index, (layer, &shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            nodes.push(build_node(layer, shape, rng).map_err(|reason| Error::Build { index, reason })?);
        }
        let model = Self { spec, nodes };
        log::debug!("built model with {} parameters", model.param_count());
        Ok(model)
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = x.clone();
        for n in &mut self.nodes {
            a = n.forward(&a)?;
        }
        Ok(a)
    }

    /// Backpropagate `grad_out`; parameter gradients are stored on the
    /// layers and the gradient w.r.t. the model input is returned.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for n in self.nodes.iter_mut().rev() {
            g = n.backward(&g)?;
        }
        Ok(g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, &Tensor<T>)) {
        for (i, n) in self.nodes.iter_mut().enumerate() {
            n.visit_params(&i.to_string(), f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(Node::param_count).sum()
    }

    /// `(name, value)` copies of all parameters.
    pub fn params(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![];
        self.visit_params(&mut |name, v, _| out.push((name.to_string(), v.clone())));
        out
    }

    /// `(name, grad)` copies from the last backward.
    pub fn grads(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![];
        self.visit_params(&mut |name, _, g| out.push((name.to_string(), g.clone())));
        out
    }

    pub fn grad_norm(&mut self) -> f64 {
        let mut sq = 0.0;
        self.visit_params(&mut |_, _, g| sq += g.norm_sq().to_f64_lossy());
        sq.sqrt()
    }

    /// Gradient norm per named parameter, formatted for diagnostics.
    pub fn grad_norm_report(&mut self) -> String {
        let mut parts = vec![];
        self.visit_params(&mut |name, _, g| parts.push(format!("{name}={:.3e}", g.norm_sq().to_f64_lossy().sqrt())));
        parts.join(", ")
    }

    /// `||dL/dx||` at the input of every convolution, in forward order.
    pub fn conv_input_grad_norms(&self) -> Vec<f64> {
        let mut out = vec![];
        for n in &self.nodes {
            n.collect_input_grad_norms(&mut out);
        }
        out
    }
}
