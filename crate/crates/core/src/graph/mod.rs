//! Network representation: an ordered list of layers and residual blocks.
//!
//! A [`ModelGraph`] is a sequence of [`Node`]s. Plain layers run in order; a
//! [`ResidualBlock`] runs its body and its shortcut on the same input, adds the
//! two and applies a ReLU. This covers VGG-style chains and basic-block ResNets.

mod builders;
mod flops;
mod init;
mod serialize;
mod shapes;

pub use builders::{
    build_resnet, build_resnet34_imagenet, build_resnet_cifar, build_tiny_cnn, build_vgg16_cifar, Head,
    ResNetConfig, ShortcutKind, StemConfig, TinyCnnConfig,
};
pub use flops::{count_flops, flop_reduction, FlopReport, FlopRow, ReductionReport, ReductionRow};
pub use init::initialize;
pub use serialize::{
    deserialize, serialize, weights_checksum, ModelFiles, FORMAT_VERSION, MANIFEST_EXTENSION,
    WEIGHTS_EXTENSION,
};
pub use shapes::infer_shapes;

use serde::{Deserialize, Serialize};

use crate::ops::{BatchNormParams, ConvGeometry, LayerParams, BN_EPSILON, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
    Relu,
    MaxPool,
    AvgPool,
    BatchNorm,
    Softmax,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

/// What a layer computes, with its learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv { geometry: ConvGeometry, params: LayerParams },
    Linear { params: LayerParams },
    BatchNorm { params: BatchNormParams },
    Relu,
    /// 2x2 window, stride 2.
    MaxPool,
    /// Global average over the spatial extent.
    AvgPool,
    Softmax,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv { .. } => LayerKind::Conv,
            LayerOp::Linear { .. } => LayerKind::Linear,
            LayerOp::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::MaxPool => LayerKind::MaxPool,
            LayerOp::AvgPool => LayerKind::AvgPool,
            LayerOp::Softmax => LayerKind::Softmax,
        }
    }
}

/// Channel counts and spatial extents filled in by [`infer_shapes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_spatial: (usize, usize),
    pub out_spatial: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    /// Feature-map-size stage the layer belongs to.
    pub stage: usize,
    pub op: LayerOp,
    pub shape: Option<LayerShape>,
}

impl Layer {
    pub fn new(id: impl Into<String>, stage: usize, op: LayerOp) -> Self {
        Layer {
            id: id.into(),
            stage,
            op,
            shape: None,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.op, LayerOp::Conv { .. })
    }

    /// Weights and bias for conv and linear layers.
    pub fn dense_params(&self) -> Option<&LayerParams> {
        match &self.op {
            LayerOp::Conv { params, .. } | LayerOp::Linear { params } => Some(params),
            _ => None,
        }
    }

    pub fn dense_params_mut(&mut self) -> Option<&mut LayerParams> {
        match &mut self.op {
            LayerOp::Conv { params, .. } | LayerOp::Linear { params } => Some(params),
            _ => None,
        }
    }

    pub fn bn_params(&self) -> Option<&BatchNormParams> {
        match &self.op {
            LayerOp::BatchNorm { params } => Some(params),
            _ => None,
        }
    }

    pub fn bn_params_mut(&mut self) -> Option<&mut BatchNormParams> {
        match &mut self.op {
            LayerOp::BatchNorm { params } => Some(params),
            _ => None,
        }
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match &self.op {
            LayerOp::Conv { geometry, .. } => Some(*geometry),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    /// Adds the block input unchanged; channel counts and spatial sizes must match.
    Identity,
    /// Subsamples the input by `stride` and zero-pads the extra output channels
    /// (appended after the input channels). Carries no parameters.
    IdentityPad { stride: usize },
    /// A strided 1x1 convolution, optionally followed by batch-norm.
    Projection { conv: Layer, bn: Option<Layer> },
}

impl Shortcut {
    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            Shortcut::Projection { conv, bn } => std::iter::once(conv).chain(bn.as_ref()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        match self {
            Shortcut::Projection { conv, bn } => std::iter::once(conv).chain(bn.as_mut()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_identity_like(&self) -> bool {
        !matches!(self, Shortcut::Projection { .. })
    }
}

/// `relu(body(x) + shortcut(x))`. The body holds exactly two convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub id: String,
    pub stage: usize,
    pub body: Vec<Layer>,
    pub shortcut: Shortcut,
}

impl ResidualBlock {
    fn convs(&self) -> impl Iterator<Item = &Layer> {
        self.body.iter().filter(|l| l.is_conv())
    }

    pub fn first_conv(&self) -> Option<&Layer> {
        self.convs().next()
    }

    pub fn second_conv(&self) -> Option<&Layer> {
        self.convs().last()
    }

    pub fn shortcut_conv(&self) -> Option<&Layer> {
        match &self.shortcut {
            Shortcut::Projection { conv, .. } => Some(conv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Layer(Layer),
    Block(ResidualBlock),
}

impl Node {
    /// Layers in execution order: body first, then the shortcut path.
    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            Node::Layer(l) => vec![l],
            Node::Block(b) => b.body.iter().chain(b.shortcut.layers()).collect(),
        }
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        match self {
            Node::Layer(l) => vec![l],
            Node::Block(b) => {
                let ResidualBlock { body, shortcut, .. } = b;
                body.iter_mut().chain(shortcut.layers_mut()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    /// `(channels, height, width)` of one input image.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub nodes: Vec<Node>,
    pub bn_epsilon: f32,
    pub bn_momentum: f32,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], class_count: usize) -> Self {
        ModelGraph {
            name: name.into(),
            input_shape,
            class_count,
            nodes: Vec::new(),
            bn_epsilon: BN_EPSILON,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn push_layer(&mut self, layer: Layer) {
        self.nodes.push(Node::Layer(layer));
    }

    pub fn push_block(&mut self, block: ResidualBlock) {
        self.nodes.push(Node::Block(block));
    }

    pub fn layers(&self) -> Vec<&Layer> {
        self.nodes.iter().flat_map(|n| n.layers()).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        self.nodes.iter_mut().flat_map(|n| n.layers_mut()).collect()
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers().into_iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut Layer> {
        self.layers_mut().into_iter().find(|l| l.id == id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Block(b) => Some(b),
            Node::Layer(_) => None,
        })
    }

    pub fn conv_ids(&self) -> Vec<String> {
        self.layers().into_iter().filter(|l| l.is_conv()).map(|l| l.id.clone()).collect()
    }

    pub fn is_inferred(&self) -> bool {
        self.layers().iter().all(|l| l.shape.is_some())
    }

    /// Number of distinct stage indices used by the layers.
    pub fn stage_count(&self) -> usize {
        self.layers().iter().map(|l| l.stage + 1).max().unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| match &l.op {
                LayerOp::Conv { params, .. } | LayerOp::Linear { params } => params.weights.len() + params.bias.len(),
                LayerOp::BatchNorm { params } => 4 * params.channels(),
                _ => 0,
            })
            .sum()
    }
}
