//! Graph execution: eval-mode inference and a recorded train-mode pass with
//! its backward sweep.
//!
//! A trailing softmax layer is not executed by [`forward`] or
//! [`forward_train`]; both return logits, and the loss applies the softmax.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerOp, ModelGraph, Node, ResidualBlock, Shortcut};
use crate::ops::{self, BatchNormCache};
use crate::tensor::Tensor4;

fn at(id: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Shape { layer, expected, actual } => Error::Shape {
            layer: format!("{id} ({layer})"),
            expected,
            actual,
        },
        other => other,
    }
}

fn check_input(graph: &ModelGraph, input: &Tensor4) -> Result<()> {
    let [_, c, h, w] = input.dims();
    if [c, h, w] != graph.input_shape {
        return Err(Error::shape(
            format!("{} input", graph.name),
            format!("{:?}", graph.input_shape),
            format!("{:?}", [c, h, w]),
        ));
    }
    Ok(())
}

fn eval_layer(layer: &Layer, x: &Tensor4, eps: f32) -> Result<Tensor4> {
    let id = layer.id.as_str();
    match &layer.op {
        LayerOp::Conv { geometry, params } => ops::conv2d_forward(x, params, *geometry).map_err(at(id)),
        LayerOp::Linear { params } => ops::linear_forward(x, params).map_err(at(id)),
        LayerOp::BatchNorm { params } => ops::batchnorm_forward_eval(x, params, eps).map_err(at(id)),
        LayerOp::Relu => Ok(ops::relu_forward(x)),
        LayerOp::MaxPool => ops::maxpool2x2_forward(x).map(|(y, _)| y).map_err(at(id)),
        LayerOp::AvgPool => Ok(ops::avgpool_global_forward(x)),
        LayerOp::Softmax => Ok(ops::softmax(x)),
    }
}

fn pad_shortcut(x: &Tensor4, stride: usize, out_channels: usize) -> Tensor4 {
    let [batch, c, h, w] = x.dims();
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Tensor4::zeros([batch, out_channels, oh, ow]);
    for b in 0..batch {
        for j in 0..c.min(out_channels) {
            for y in 0..oh {
                for xo in 0..ow {
                    out.set(b, j, y, xo, x.at(b, j, y * stride, xo * stride));
                }
            }
        }
    }
    out
}

fn pad_shortcut_backward(g: &Tensor4, stride: usize, input_dims: [usize; 4]) -> Tensor4 {
    let [batch, c, _, _] = input_dims;
    let [_, oc, oh, ow] = g.dims();
    let mut out = Tensor4::zeros(input_dims);
    for b in 0..batch {
        for j in 0..c.min(oc) {
            for y in 0..oh {
                for xo in 0..ow {
                    out.set(b, j, y * stride, xo * stride, g.at(b, j, y, xo));
                }
            }
        }
    }
    out
}

fn add_into(acc: &mut Tensor4, other: &Tensor4, what: &str) -> Result<()> {
    if acc.dims() != other.dims() {
        return Err(Error::shape(what, format!("{:?}", acc.dims()), format!("{:?}", other.dims())));
    }
    acc.data_mut().iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
    Ok(())
}

type Observer<'a> = dyn FnMut(&Layer, &Tensor4) + 'a;

fn eval_block(block: &ResidualBlock, x: &Tensor4, eps: f32, observe: &mut Observer<'_>) -> Result<Tensor4> {
    let mut y = x.clone();
    for layer in &block.body {
        y = eval_layer(layer, &y, eps)?;
        observe(layer, &y);
    }
    let short = match &block.shortcut {
        Shortcut::Identity => x.clone(),
        Shortcut::IdentityPad { stride } => pad_shortcut(x, *stride, y.dims()[1]),
        Shortcut::Projection { conv, bn } => {
            let mut s = eval_layer(conv, x, eps)?;
            observe(conv, &s);
            if let Some(bn) = bn {
                s = eval_layer(bn, &s, eps)?;
                observe(bn, &s);
            }
            s
        }
    };
    add_into(&mut y, &short, &block.id)?;
    Ok(ops::relu_forward(&y))
}

/// Eval-mode forward pass calling `observe` with every layer's output,
/// including layers inside residual blocks. Returns the logits.
pub fn forward_observed(graph: &ModelGraph, input: &Tensor4, observe: &mut Observer<'_>) -> Result<Tensor4> {
    check_input(graph, input)?;
    let eps = graph.bn_epsilon;
    let mut x = input.clone();
    for node in &graph.nodes {
        match node {
            Node::Layer(layer) if matches!(layer.op, LayerOp::Softmax) => {}
            Node::Layer(layer) => {
                x = eval_layer(layer, &x, eps)?;
                observe(layer, &x);
            }
            Node::Block(block) => x = eval_block(block, &x, eps, observe)?,
        }
    }
    Ok(x)
}

/// Eval-mode logits for a batch.
pub fn forward(graph: &ModelGraph, input: &Tensor4) -> Result<Tensor4> {
    forward_observed(graph, input, &mut |_, _| {})
}

/// Class probabilities for a batch.
pub fn forward_probabilities(graph: &ModelGraph, input: &Tensor4) -> Result<Tensor4> {
    forward(graph, input).map(|logits| ops::softmax(&logits))
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Bn(BatchNormCache),
    Pool(Vec<usize>),
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Tensor4,
    aux: Aux,
}

#[derive(Debug, Clone)]
struct BlockTape {
    input_dims: [usize; 4],
    body: Vec<LayerTape>,
    shortcut: Vec<LayerTape>,
    sum: Tensor4,
}

#[derive(Debug, Clone)]
enum NodeTape {
    Layer(LayerTape),
    Block(BlockTape),
    Skipped,
}

/// Everything a train-mode forward pass records for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<NodeTape>,
}

fn train_layer(layer: &mut Layer, x: Tensor4, eps: f32, momentum: f32) -> Result<(Tensor4, LayerTape)> {
    let id = layer.id.clone();
    let (y, aux) = match &mut layer.op {
        LayerOp::Conv { geometry, params } => (ops::conv2d_forward(&x, params, *geometry).map_err(at(&id))?, Aux::None),
        LayerOp::Linear { params } => (ops::linear_forward(&x, params).map_err(at(&id))?, Aux::None),
        LayerOp::BatchNorm { params } => {
            let (y, cache) = ops::batchnorm_forward_train(&x, params, eps, momentum).map_err(at(&id))?;
            (y, Aux::Bn(cache))
        }
        LayerOp::Relu => (ops::relu_forward(&x), Aux::None),
        LayerOp::MaxPool => {
            let (y, arg) = ops::maxpool2x2_forward(&x).map_err(at(&id))?;
            (y, Aux::Pool(arg))
        }
        LayerOp::AvgPool => (ops::avgpool_global_forward(&x), Aux::None),
        LayerOp::Softmax => return Err(Error::Invariant(format!("{id}: softmax inside a trainable path"))),
    };
    Ok((y, LayerTape { input: x, aux }))
}

/// Train-mode forward pass. Batch-norm layers normalize with batch statistics
/// and update their running estimates in place.
pub fn forward_train(graph: &mut ModelGraph, input: &Tensor4) -> Result<(Tensor4, Tape)> {
    check_input(graph, input)?;
    let (eps, momentum) = (graph.bn_epsilon, graph.bn_momentum);
    let mut x = input.clone();
    let mut tapes = Vec::with_capacity(graph.nodes.len());
    for node in &mut graph.nodes {
        match node {
            Node::Layer(layer) if matches!(layer.op, LayerOp::Softmax) => tapes.push(NodeTape::Skipped),
            Node::Layer(layer) => {
                let (y, tape) = train_layer(layer, x, eps, momentum)?;
                tapes.push(NodeTape::Layer(tape));
                x = y;
            }
            Node::Block(block) => {
                let input_dims = x.dims();
                let mut body = Vec::with_capacity(block.body.len());
                let mut y = x.clone();
                for layer in &mut block.body {
                    let (next, tape) = train_layer(layer, y, eps, momentum)?;
                    body.push(tape);
                    y = next;
                }
                let mut shortcut = Vec::new();
                let short = match &mut block.shortcut {
                    Shortcut::Identity => x,
                    Shortcut::IdentityPad { stride } => pad_shortcut(&x, *stride, y.dims()[1]),
                    Shortcut::Projection { conv, bn } => {
                        let (mut s, tape) = train_layer(conv, x, eps, momentum)?;
                        shortcut.push(tape);
                        if let Some(bn) = bn {
                            let (next, tape) = train_layer(bn, s, eps, momentum)?;
                            shortcut.push(tape);
                            s = next;
                        }
                        s
                    }
                };
                add_into(&mut y, &short, &block.id)?;
                x = ops::relu_forward(&y);
                tapes.push(NodeTape::Block(BlockTape {
                    input_dims,
                    body,
                    shortcut,
                    sum: y,
                }));
            }
        }
    }
    Ok((x, Tape { nodes: tapes }))
}

/// Parameter gradient of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Dense { weights: Vec<f32>, bias: Vec<f32> },
    BatchNorm { gamma: Vec<f32>, beta: Vec<f32> },
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub by_layer: HashMap<String, ParamGrad>,
    /// Gradient with respect to the network input.
    pub input: Tensor4,
}

fn backward_layer(layer: &Layer, tape: &LayerTape, g: Tensor4, grads: &mut HashMap<String, ParamGrad>) -> Result<Tensor4> {
    let id = layer.id.as_str();
    match (&layer.op, &tape.aux) {
        (LayerOp::Conv { geometry, params }, _) => {
            let r = ops::conv2d_backward(&g, &tape.input, params, *geometry).map_err(at(id))?;
            grads.insert(
                layer.id.clone(),
                ParamGrad::Dense {
                    weights: r.grad_weights.into_vec(),
                    bias: r.grad_bias,
                },
            );
            Ok(r.grad_input)
        }
        (LayerOp::Linear { params }, _) => {
            let r = ops::linear_backward(&g, &tape.input, params).map_err(at(id))?;
            grads.insert(
                layer.id.clone(),
                ParamGrad::Dense {
                    weights: r.grad_weights.into_vec(),
                    bias: r.grad_bias,
                },
            );
            Ok(r.grad_input)
        }
        (LayerOp::BatchNorm { params }, Aux::Bn(cache)) => {
            let r = ops::batchnorm_backward(&g, cache, params).map_err(at(id))?;
            grads.insert(
                layer.id.clone(),
                ParamGrad::BatchNorm {
                    gamma: r.grad_gamma,
                    beta: r.grad_beta,
                },
            );
            Ok(r.grad_input)
        }
        (LayerOp::Relu, _) => ops::relu_backward(&g, &tape.input).map_err(at(id)),
        (LayerOp::MaxPool, Aux::Pool(arg)) => ops::maxpool2x2_backward(&g, arg, tape.input.dims()).map_err(at(id)),
        (LayerOp::AvgPool, _) => ops::avgpool_global_backward(&g, tape.input.dims()).map_err(at(id)),
        _ => Err(Error::Invariant(format!("{id}: tape does not match layer"))),
    }
}

/// Back-propagates `grad_logits` through a recorded pass. `graph` must be the
/// graph that [`forward_train`] ran on.
pub fn backward(graph: &ModelGraph, tape: &Tape, grad_logits: Tensor4) -> Result<Gradients> {
    if tape.nodes.len() != graph.nodes.len() {
        return Err(Error::Invariant("tape was recorded on a different graph".into()));
    }
    let mut grads = HashMap::new();
    let mut g = grad_logits;
    for (node, nt) in graph.nodes.iter().zip(&tape.nodes).rev() {
        match (node, nt) {
            (_, NodeTape::Skipped) => {}
            (Node::Layer(layer), NodeTape::Layer(t)) => g = backward_layer(layer, t, g, &mut grads)?,
            (Node::Block(block), NodeTape::Block(t)) => {
                let g_sum = ops::relu_backward(&g, &t.sum).map_err(at(&block.id))?;
                let mut gb = g_sum.clone();
                for (layer, lt) in block.body.iter().zip(&t.body).rev() {
                    gb = backward_layer(layer, lt, gb, &mut grads)?;
                }
                let gs = match &block.shortcut {
                    Shortcut::Identity => g_sum,
                    Shortcut::IdentityPad { stride } => pad_shortcut_backward(&g_sum, *stride, t.input_dims),
                    Shortcut::Projection { .. } => {
                        let layers = block.shortcut.layers();
                        let mut gs = g_sum;
                        for (layer, lt) in layers.iter().zip(&t.shortcut).rev() {
                            gs = backward_layer(layer, lt, gs, &mut grads)?;
                        }
                        gs
                    }
                };
                add_into(&mut gb, &gs, &block.id)?;
                g = gb;
            }
            _ => return Err(Error::Invariant("tape does not match graph structure".into())),
        }
    }
    Ok(Gradients { by_layer: grads, input: g })
}
