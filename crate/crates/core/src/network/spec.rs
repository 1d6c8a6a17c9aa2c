//! Declarative model descriptions and the stock architectures.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::conv::{WeightInit, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::norm::default_groups;

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    NcConv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        init: WeightInit,
        #[serde(default)]
        epsilon: Option<f64>,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        init: WeightInit,
    },
    GroupNorm {
        #[serde(default)]
        groups: Option<usize>,
        #[serde(default)]
        epsilon: Option<f64>,
    },
    Activation {
        kind: ActivationKind,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        out_features: usize,
    },
    Residual {
        main: Vec<LayerSpec>,
        #[serde(default)]
        shortcut: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Activation shape flowing between layers (batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Image(usize, usize, usize),
    Flat(usize),
}

impl FeatureShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Image(c, h, w) => vec![c, h, w],
            FeatureShape::Flat(f) => vec![f],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Nc,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Gn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// Three residual stages of one basic block each.
    Resnet8,
    /// Four 3x3 convolutions, the last three with stride 2.
    Plain4,
    /// One 3x3 convolution, activation, flatten, linear classifier.
    TwoLayer,
}

/// Named architecture plus the knobs the experiments vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub arch: ArchKind,
    pub conv: ConvKind,
    pub norm: NormKind,
    pub activation: ActivationKind,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub epsilon: f64,
    /// GroupNorm group count; `None` picks [`default_groups`] per layer.
    pub gn_groups: Option<usize>,
    pub init: WeightInit,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Resnet8,
            conv: ConvKind::Nc,
            norm: NormKind::None,
            activation: ActivationKind::Relu,
            classes: 10,
            widths: vec![16, 32, 64],
            epsilon: DEFAULT_EPSILON,
            gn_groups: None,
            init: WeightInit::FanIn,
        }
    }
}

impl ArchConfig {
    fn conv(&self, out_channels: usize, kernel: usize, stride: usize) -> LayerSpec {
        let padding = kernel / 2;
        match self.conv {
            ConvKind::Nc => LayerSpec::NcConv {
                out_channels,
                kernel,
                stride,
                padding,
                init: self.init,
                epsilon: Some(self.epsilon),
            },
            ConvKind::Standard => LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                init: self.init,
            },
        }
    }

    fn norm(&self, channels: usize, out: &mut Vec<LayerSpec>) {
        if self.norm == NormKind::Gn {
            let groups = self
                .gn_groups
                .filter(|g| channels.is_multiple_of(*g))
                .unwrap_or_else(|| default_groups(channels));
            out.push(LayerSpec::GroupNorm {
                groups: Some(groups),
                epsilon: None,
            });
        }
    }

    fn act(&self) -> LayerSpec {
        LayerSpec::Activation { kind: self.activation }
    }

    fn basic_block(&self, in_ch: usize, out_ch: usize, stride: usize) -> LayerSpec {
        let mut main = vec![self.conv(out_ch, 3, stride)];
        self.norm(out_ch, &mut main);
        main.push(self.act());
        main.push(self.conv(out_ch, 3, 1));
        self.norm(out_ch, &mut main);
        let mut shortcut = vec![];
        if stride != 1 || in_ch != out_ch {
            // projection shortcuts are always standard 1x1 convolutions
            shortcut.push(LayerSpec::Conv {
                out_channels: out_ch,
                kernel: 1,
                stride,
                padding: 0,
                init: self.init,
            });
            self.norm(out_ch, &mut shortcut);
        }
        LayerSpec::Residual { main, shortcut }
    }

    /// Expand to a layer list for images of shape `input`.
    pub fn to_spec(&self, input: [usize; 3]) -> Result<ModelSpec> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid widths {:?}", self.widths)));
        }
        let mut layers = vec![];
        match self.arch {
            ArchKind::Resnet8 => {
                let w = &self.widths;
                layers.push(self.conv(w[0], 3, 1));
                self.norm(w[0], &mut layers);
                layers.push(self.act());
                let mut prev = w[0];
                for (stage, &width) in w.iter().enumerate() {
                    let stride = if stage == 0 { 1 } else { 2 };
                    layers.push(self.basic_block(prev, width, stride));
                    layers.push(self.act());
                    prev = width;
                }
                layers.push(LayerSpec::GlobalAvgPool);
                layers.push(LayerSpec::Linear {
                    out_features: self.classes,
                });
            }
            ArchKind::Plain4 => {
                let w = &self.widths;
                let chans = [w[0], *w.get(1).unwrap_or(&w[0]), *w.get(2).unwrap_or(&w[0]), *w.last().unwrap()];
                for (i, &c) in chans.iter().enumerate() {
                    layers.push(self.conv(c, 3, if i == 0 { 1 } else { 2 }));
                    self.norm(c, &mut layers);
                    layers.push(self.act());
                }
                layers.push(LayerSpec::GlobalAvgPool);
                layers.push(LayerSpec::Linear {
                    out_features: self.classes,
                });
            }
            ArchKind::TwoLayer => {
                layers.push(self.conv(self.widths[0], 3, 1));
                self.norm(self.widths[0], &mut layers);
                layers.push(self.act());
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Linear {
                    out_features: self.classes,
                });
            }
        }
        Ok(ModelSpec { input, layers })
    }
}

/// Output shape of `layer` applied to `input`, or a reason it cannot apply.
pub(crate) fn layer_output(layer: &LayerSpec, input: FeatureShape) -> std::result::Result<FeatureShape, String> {
    let image = |what: &str| match input {
        FeatureShape::Image(c, h, w) => Ok((c, h, w)),
        FeatureShape::Flat(_) => Err(format!("{what} needs an image input, got a flat vector")),
    };
    let conv_out = |c, h, w, out_channels: usize, kernel: usize, stride: usize, padding: usize| {
        crate::im2col::ConvGeometry::square(c, out_channels, kernel, stride, padding, (h, w))
            .map(|g| {
                let (oh, ow) = g.output();
                FeatureShape::Image(out_channels, oh, ow)
            })
            .map_err(|e| e.to_string())
    };
    match layer {
        LayerSpec::NcConv {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        }
        | LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = image("convolution")?;
            conv_out(c, h, w, *out_channels, *kernel, *stride, *padding)
        }
        LayerSpec::GroupNorm { groups, .. } => {
            let (c, _, _) = image("group norm")?;
            let g = groups.unwrap_or_else(|| default_groups(c));
            if g == 0 || c % g != 0 {
                return Err(format!("{g} groups do not divide {c} channels"));
            }
            Ok(input)
        }
        LayerSpec::Activation { .. } => Ok(input),
        LayerSpec::GlobalAvgPool => {
            let (c, _, _) = image("global average pool")?;
            Ok(FeatureShape::Flat(c))
        }
        LayerSpec::Flatten => Ok(FeatureShape::Flat(input.dims().iter().product())),
        LayerSpec::Linear { out_features } => match input {
            FeatureShape::Flat(_) => Ok(FeatureShape::Flat(*out_features)),
            FeatureShape::Image(..) => Err("linear layer needs a flat input; add flatten or pooling".into()),
        },
        LayerSpec::Residual { main, shortcut } => {
            let run = |layers: &[LayerSpec], branch: &str| {
                layers.iter().enumerate().try_fold(input, |s, (i, l)| {
                    layer_output(l, s).map_err(|e| format!("{branch} branch layer {i}: {e}"))
                })
            };
            let a = run(main, "main")?;
            let b = run(shortcut, "shortcut")?;
            if a != b {
                return Err(format!("residual branches disagree: main {:?}, shortcut {:?}", a.dims(), b.dims()));
            }
            Ok(a)
        }
    }
}

impl ModelSpec {
    /// Shapes after every top-level layer; errors cite the layer index.
    pub fn infer_shapes(&self) -> Result<Vec<FeatureShape>> {
        let [c, h, w] = self.input;
        let mut shape = FeatureShape::Image(c, h, w);
        let mut out = vec![shape];
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer_output(layer, shape).map_err(|reason| Error::Build { index, reason })?;
            out.push(shape);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet8_ends_in_class_logits() {
        let spec = ArchConfig::default().to_spec([3, 32, 32]).unwrap();
        let shapes = spec.infer_shapes().unwrap();
        assert_eq!(*shapes.last().unwrap(), FeatureShape::Flat(10));
        // stage outputs: 16x32x32, 32x16x16, 64x8x8
        assert!(shapes.contains(&FeatureShape::Image(32, 16, 16)));
        assert!(shapes.contains(&FeatureShape::Image(64, 8, 8)));
    }

    #[test]
    fn linear_on_image_is_build_error_with_index() {
        let spec = ModelSpec {
            input: [1, 4, 4],
            layers: vec![
                LayerSpec::Activation {
                    kind: ActivationKind::Relu,
                },
                LayerSpec::Linear { out_features: 3 },
            ],
        };
        match spec.infer_shapes() {
            Err(Error::Build { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn residual_mismatch_detected() {
        let spec = ModelSpec {
            input: [2, 4, 4],
            layers: vec![LayerSpec::Residual {
                main: vec![LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    init: WeightInit::FanIn,
                }],
                shortcut: vec![],
            }],
        };
        assert!(matches!(spec.infer_shapes(), Err(Error::Build { index: 0, .. })));
    }

    #[test]
    fn gn_models_insert_norm_after_conv() {
        let cfg = ArchConfig {
            conv: ConvKind::Standard,
            norm: NormKind::Gn,
            arch: ArchKind::Plain4,
            ..ArchConfig::default()
        };
        let spec = cfg.to_spec([3, 32, 32]).unwrap();
        let gn = spec.layers.iter().filter(|l| matches!(l, LayerSpec::GroupNorm { .. })).count();
        assert_eq!(gn, 4);
        spec.infer_shapes().unwrap();
    }

    #[test]
    fn nc_models_have_no_norm_layers() {
        let spec = ArchConfig::default().to_spec([3, 32, 32]).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(!json.contains("group_norm"));
        assert!(json.contains("nc_conv"));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = ArchConfig::default().to_spec([3, 32, 32]).unwrap();
        let back: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
