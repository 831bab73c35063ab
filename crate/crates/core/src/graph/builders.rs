//! Reference architectures.
//!
//! Layer ids follow a global 1-based conv index: `conv_1` is the first
//! convolution in execution order (the stem, for ResNets). In a ResNet the
//! `b`-th residual block (0-based) holds `conv_{2b+2}` and `conv_{2b+3}`, so its
//! first layer always has an even index. Projection shortcuts are named
//! `shortcut_{b+1}` and do not take part in the numbering. Batch-norm and ReLU
//! layers share the index of the convolution they follow.

use serde::{Deserialize, Serialize};

use super::{initialize, Layer, LayerOp, ModelGraph, ResidualBlock, Shortcut};
use crate::error::{Error, Result};
use crate::ops::{BatchNormParams, ConvGeometry, LayerParams};
use crate::tensor::Tensor4;

pub(crate) fn conv_layer(id: impl Into<String>, stage: usize, inp: usize, out: usize, geometry: ConvGeometry) -> Layer {
    let weights = Tensor4::zeros([out, inp, geometry.kernel, geometry.kernel]);
    Layer::new(
        id,
        stage,
        LayerOp::Conv {
            geometry,
            params: LayerParams { weights, bias: vec![0.0; out] },
        },
    )
}

pub(crate) fn linear_layer(id: impl Into<String>, stage: usize, inp: usize, out: usize) -> Layer {
    Layer::new(
        id,
        stage,
        LayerOp::Linear {
            params: LayerParams {
                weights: Tensor4::zeros([out, inp, 1, 1]),
                bias: vec![0.0; out],
            },
        },
    )
}

pub(crate) fn bn_layer(id: impl Into<String>, stage: usize, channels: usize) -> Layer {
    Layer::new(
        id,
        stage,
        LayerOp::BatchNorm {
            params: BatchNormParams::identity(channels),
        },
    )
}

fn relu(id: impl Into<String>, stage: usize) -> Layer {
    Layer::new(id, stage, LayerOp::Relu)
}

/// VGG-16 adapted to 32x32 CIFAR-10 inputs: 13 3x3 convs, each followed by
/// batch-norm and ReLU, max-pooling after conv 2, 4, 7, 10 and 13, then a
/// 512-512 linear layer with batch-norm and a 512-10 classifier.
pub fn build_vgg16_cifar(seed: u64) -> ModelGraph {
    const MAPS: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
    const POOL_AFTER: [usize; 5] = [2, 4, 7, 10, 13];
    let mut g = ModelGraph::new("vgg16-cifar10", [3, 32, 32], 10);
    let same = ConvGeometry::new(3, 1, 1);
    let mut inp = 3;
    let mut stage = 0;
    for (i, &maps) in MAPS.iter().enumerate() {
        let n = i + 1;
        g.push_layer(conv_layer(format!("conv_{n}"), stage, inp, maps, same));
        g.push_layer(bn_layer(format!("bn_{n}"), stage, maps));
        g.push_layer(relu(format!("relu_{n}"), stage));
        if POOL_AFTER.contains(&n) {
            g.push_layer(Layer::new(format!("pool_{n}"), stage, LayerOp::MaxPool));
            stage += 1;
        }
        inp = maps;
    }
    g.push_layer(linear_layer("linear_1", stage, 512, 512));
    g.push_layer(bn_layer("bn_linear_1", stage, 512));
    g.push_layer(relu("relu_linear_1", stage));
    g.push_layer(linear_layer("linear_2", stage, 512, 10));
    initialize(&mut g, seed);
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutKind {
    /// Parameter-free subsample-and-zero-pad at stage boundaries.
    IdentityPad,
    /// 1x1 strided convolution plus batch-norm at stage boundaries.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Follow the stem with a 2x2 max-pool.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub name: String,
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub classes: usize,
    pub stem: StemConfig,
    /// Residual blocks in each stage.
    pub stage_blocks: Vec<usize>,
    /// Output channels of each stage.
    pub widths: Vec<usize>,
    pub shortcut: ShortcutKind,
}

impl ResNetConfig {
    /// CIFAR ResNet layout: 16/32/64 channels at 32x32/16x16/8x8.
    pub fn cifar(depth: usize) -> Result<Self> {
        if depth < 8 || (depth - 2) % 6 != 0 {
            return Err(Error::Validation(format!(
                "CIFAR ResNet depth must be 6n+2 with n >= 1, got {depth}"
            )));
        }
        let n = (depth - 2) / 6;
        Ok(ResNetConfig {
            name: format!("resnet{depth}-cifar10"),
            input: [3, 32, 32],
            classes: 10,
            stem: StemConfig {
                channels: 16,
                kernel: 3,
                stride: 1,
                pad: 1,
                pool: false,
            },
            stage_blocks: vec![n; 3],
            widths: vec![16, 32, 64],
            shortcut: ShortcutKind::IdentityPad,
        })
    }
}

/// Basic-block ResNet. The first block of every stage after the first halves
/// the spatial size; its shortcut follows `config.shortcut`. All other blocks
/// use plain identity shortcuts.
pub fn build_resnet(config: &ResNetConfig, seed: u64) -> Result<ModelGraph> {
    if config.stage_blocks.len() != config.widths.len() || config.stage_blocks.is_empty() {
        return Err(Error::Validation("ResNet needs one width per stage and at least one stage".into()));
    }
    if config.stage_blocks.contains(&0) {
        return Err(Error::Validation("every ResNet stage needs at least one block".into()));
    }
    let mut g = ModelGraph::new(config.name.clone(), config.input, config.classes);
    let s = &config.stem;
    g.push_layer(conv_layer("conv_1", 0, config.input[0], s.channels, ConvGeometry::new(s.kernel, s.stride, s.pad)));
    g.push_layer(bn_layer("bn_1", 0, s.channels));
    g.push_layer(relu("relu_1", 0));
    if s.pool {
        g.push_layer(Layer::new("pool_1", 0, LayerOp::MaxPool));
    }
    let mut inp = s.channels;
    let mut index = 0usize;
    for (stage, (&blocks, &width)) in config.stage_blocks.iter().zip(&config.widths).enumerate() {
        for b in 0..blocks {
            let first = 2 * index + 2;
            let second = first + 1;
            let downsample = stage > 0 && b == 0;
            let stride = if downsample { 2 } else { 1 };
            let body = vec![
                conv_layer(format!("conv_{first}"), stage, inp, width, ConvGeometry::new(3, stride, 1)),
                bn_layer(format!("bn_{first}"), stage, width),
                relu(format!("relu_{first}"), stage),
                conv_layer(format!("conv_{second}"), stage, width, width, ConvGeometry::new(3, 1, 1)),
                bn_layer(format!("bn_{second}"), stage, width),
            ];
            let shortcut = if inp == width && !downsample {
                Shortcut::Identity
            } else {
                match config.shortcut {
                    ShortcutKind::IdentityPad => Shortcut::IdentityPad { stride },
                    ShortcutKind::Projection => Shortcut::Projection {
                        conv: conv_layer(format!("shortcut_{}", index + 1), stage, inp, width, ConvGeometry::new(1, stride, 0)),
                        bn: Some(bn_layer(format!("shortcut_bn_{}", index + 1), stage, width)),
                    },
                }
            };
            g.push_block(ResidualBlock {
                id: format!("block_{}", index + 1),
                stage,
                body,
                shortcut,
            });
            inp = width;
            index += 1;
        }
    }
    let last = config.stage_blocks.len() - 1;
    g.push_layer(Layer::new("avgpool", last, LayerOp::AvgPool));
    g.push_layer(linear_layer("linear", last, inp, config.classes));
    initialize(&mut g, seed);
    Ok(g)
}

/// CIFAR-10 ResNet of depth `6n + 2` with zero-padded identity shortcuts.
pub fn build_resnet_cifar(depth: usize, seed: u64) -> Result<ModelGraph> {
    build_resnet(&ResNetConfig::cifar(depth)?, seed)
}

/// ImageNet ResNet-34 with projection shortcuts at the down-sampling blocks.
///
/// The stem is a 7x7 stride-2 conv followed by the 2x2 max-pool supported
/// here, which yields the same 56x56 maps as the usual 3x3 stride-2 pool.
pub fn build_resnet34_imagenet(seed: u64) -> Result<ModelGraph> {
    build_resnet(
        &ResNetConfig {
            name: "resnet34-imagenet".into(),
            input: [3, 224, 224],
            classes: 1000,
            stem: StemConfig {
                channels: 64,
                kernel: 7,
                stride: 2,
                pad: 3,
                pool: true,
            },
            stage_blocks: vec![3, 4, 6, 3],
            widths: vec![64, 128, 256, 512],
            shortcut: ShortcutKind::Projection,
        },
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Flatten `C x H x W` straight into the classifier.
    Flatten,
    /// Global average pool, then the classifier.
    GlobalAvgPool,
}

/// Small VGG-style chain for desk-scale experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyCnnConfig {
    pub input: [usize; 3],
    pub classes: usize,
    /// Output channels of each 3x3 conv.
    pub channels: Vec<usize>,
    /// Whether a 2x2 max-pool follows each conv; same length as `channels`.
    pub pool_after: Vec<bool>,
    pub batch_norm: bool,
    pub head: Head,
}

impl Default for TinyCnnConfig {
    fn default() -> Self {
        TinyCnnConfig {
            input: [3, 16, 16],
            classes: 10,
            channels: vec![16, 32, 32],
            pool_after: vec![true, true, false],
            batch_norm: true,
            head: Head::Flatten,
        }
    }
}

pub fn build_tiny_cnn(config: &TinyCnnConfig, seed: u64) -> Result<ModelGraph> {
    if config.channels.is_empty() || config.channels.len() != config.pool_after.len() {
        return Err(Error::Validation(
            "tiny CNN needs at least one conv and one pool flag per conv".into(),
        ));
    }
    if config.channels.contains(&0) || config.classes == 0 {
        return Err(Error::Validation("tiny CNN channel and class counts must be positive".into()));
    }
    let [c, mut h, mut w] = config.input;
    let mut g = ModelGraph::new("tiny-cnn", config.input, config.classes);
    let mut inp = c;
    let mut stage = 0;
    for (i, (&maps, &pool)) in config.channels.iter().zip(&config.pool_after).enumerate() {
        let n = i + 1;
        g.push_layer(conv_layer(format!("conv_{n}"), stage, inp, maps, ConvGeometry::new(3, 1, 1)));
        if config.batch_norm {
            g.push_layer(bn_layer(format!("bn_{n}"), stage, maps));
        }
        g.push_layer(relu(format!("relu_{n}"), stage));
        if pool {
            if h < 2 || w < 2 {
                return Err(Error::Validation(format!("too many pools for a {:?} input", config.input)));
            }
            g.push_layer(Layer::new(format!("pool_{n}"), stage, LayerOp::MaxPool));
            h /= 2;
            w /= 2;
            stage += 1;
        }
        inp = maps;
    }
    let features = match config.head {
        Head::Flatten => inp * h * w,
        Head::GlobalAvgPool => {
            g.push_layer(Layer::new("avgpool", stage, LayerOp::AvgPool));
            inp
        }
    };
    g.push_layer(linear_layer("linear_1", stage, features, config.classes));
    initialize(&mut g, seed);
    Ok(g)
}
