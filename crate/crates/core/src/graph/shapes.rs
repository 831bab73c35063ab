use super::{Layer, LayerOp, LayerShape, ModelGraph, Node, ResidualBlock, Shortcut};
use crate::error::{Error, Result};
use crate::ops::conv_output_size;

/// Running shape of the tensor flowing through the graph.
#[derive(Debug, Clone)]
struct Flow {
    channels: usize,
    spatial: (usize, usize),
    /// Layer that last set the channel count.
    producer: String,
}

/// Returns a copy of `graph` with every layer's shape populated, after checking
/// that channel counts agree along every path.
pub fn infer_shapes(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut out = graph.clone();
    let [c, h, w] = graph.input_shape;
    let mut flow = Flow {
        channels: c,
        spatial: (h, w),
        producer: "input".to_string(),
    };
    let count = out.nodes.len();
    for (i, node) in out.nodes.iter_mut().enumerate() {
        match node {
            Node::Layer(layer) => {
                if matches!(layer.op, LayerOp::Softmax) && i + 1 != count {
                    return Err(Error::Validation(format!(
                        "softmax layer {} must be the last layer",
                        layer.id
                    )));
                }
                flow = infer_layer(layer, &flow)?;
            }
            Node::Block(block) => flow = infer_block(block, &flow)?,
        }
    }
    if flow.channels != graph.class_count || flow.spatial != (1, 1) {
        return Err(Error::Validation(format!(
            "graph {} ends with {} channels at {:?} after {}, expected {} logits at (1, 1)",
            graph.name, flow.channels, flow.spatial, flow.producer, graph.class_count
        )));
    }
    Ok(out)
}

fn channel_mismatch(flow: &Flow, layer: &str, expected: usize) -> Error {
    Error::Validation(format!(
        "channel mismatch: {} produces {} channels but {} expects {}",
        flow.producer, flow.channels, layer, expected
    ))
}

fn infer_layer(layer: &mut Layer, flow: &Flow) -> Result<Flow> {
    let (h, w) = flow.spatial;
    let mut next = flow.clone();
    match &layer.op {
        LayerOp::Conv { geometry, params } => {
            let [out_c, in_c, kh, kw] = params.weights.dims();
            if in_c != flow.channels {
                return Err(channel_mismatch(flow, &layer.id, in_c));
            }
            if kh != geometry.kernel || kw != geometry.kernel || params.bias.len() != out_c {
                return Err(Error::Validation(format!(
                    "{}: weights {:?} and bias {} disagree with kernel {}",
                    layer.id,
                    params.weights.dims(),
                    params.bias.len(),
                    geometry.kernel
                )));
            }
            let oh = conv_output_size(h, geometry.kernel, geometry.stride, geometry.pad);
            let ow = conv_output_size(w, geometry.kernel, geometry.stride, geometry.pad);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::Validation(format!(
                    "{}: kernel {} with stride {} and pad {} does not fit a {h}x{w} input",
                    layer.id, geometry.kernel, geometry.stride, geometry.pad
                )));
            };
            next.channels = out_c;
            next.spatial = (oh, ow);
            next.producer = layer.id.clone();
        }
        LayerOp::Linear { params } => {
            let [out_f, in_f, kh, kw] = params.weights.dims();
            let features = flow.channels * h * w;
            if in_f != features || kh != 1 || kw != 1 {
                return Err(Error::Validation(format!(
                    "feature mismatch: {} yields {} features ({}x{}x{}) but {} expects {}",
                    flow.producer, features, flow.channels, h, w, layer.id, in_f
                )));
            }
            if params.bias.len() != out_f {
                return Err(Error::Validation(format!("{}: bias length {} != {out_f}", layer.id, params.bias.len())));
            }
            next.channels = out_f;
            next.spatial = (1, 1);
            next.producer = layer.id.clone();
        }
        LayerOp::BatchNorm { params } => {
            if params.channels() != flow.channels {
                return Err(channel_mismatch(flow, &layer.id, params.channels()));
            }
            params.check(&layer.id)?;
        }
        LayerOp::MaxPool => {
            if h < 2 || w < 2 {
                return Err(Error::Validation(format!("{}: cannot 2x2-pool a {h}x{w} map", layer.id)));
            }
            next.spatial = (h / 2, w / 2);
        }
        LayerOp::AvgPool => next.spatial = (1, 1),
        LayerOp::Relu | LayerOp::Softmax => {}
    }
    layer.shape = Some(LayerShape {
        in_channels: flow.channels,
        out_channels: next.channels,
        in_spatial: flow.spatial,
        out_spatial: next.spatial,
    });
    Ok(next)
}

fn infer_block(block: &mut ResidualBlock, input: &Flow) -> Result<Flow> {
    let convs = block.body.iter().filter(|l| l.is_conv()).count();
    if convs != 2 {
        return Err(Error::Validation(format!(
            "residual block {} must hold exactly two convolutions, found {convs}",
            block.id
        )));
    }
    if block.body.iter().any(|l| matches!(l.op, LayerOp::Softmax | LayerOp::Linear { .. })) {
        return Err(Error::Validation(format!("residual block {} body may only hold conv/bn/relu/pool layers", block.id)));
    }
    let mut flow = input.clone();
    for layer in &mut block.body {
        flow = infer_layer(layer, &flow)?;
    }
    let body_out = flow;
    let (h, w) = input.spatial;
    match &mut block.shortcut {
        Shortcut::Identity => {
            if input.channels != body_out.channels || input.spatial != body_out.spatial {
                return Err(Error::Validation(format!(
                    "identity shortcut of {}: input {}x{:?} from {} does not match body output {}x{:?} from {}",
                    block.id, input.channels, input.spatial, input.producer, body_out.channels, body_out.spatial, body_out.producer
                )));
            }
        }
        Shortcut::IdentityPad { stride } => {
            let s = *stride;
            if s == 0 {
                return Err(Error::Validation(format!("{}: shortcut stride must be >= 1", block.id)));
            }
            let sub = (h.div_ceil(s), w.div_ceil(s));
            if body_out.channels < input.channels || sub != body_out.spatial {
                return Err(Error::Validation(format!(
                    "padded shortcut of {}: input {}x{:?} (stride {s}) from {} cannot be padded to body output {}x{:?} from {}",
                    block.id, input.channels, input.spatial, input.producer, body_out.channels, body_out.spatial, body_out.producer
                )));
            }
        }
        Shortcut::Projection { conv, bn } => {
            if !conv.is_conv() {
                return Err(Error::Validation(format!("projection shortcut {} is not a convolution", conv.id)));
            }
            let mut sflow = infer_layer(conv, input)?;
            if let Some(bn) = bn {
                sflow = infer_layer(bn, &sflow)?;
            }
            if sflow.channels != body_out.channels || sflow.spatial != body_out.spatial {
                return Err(Error::Validation(format!(
                    "projection shortcut {} yields {}x{:?} but {} yields {}x{:?}",
                    conv.id, sflow.channels, sflow.spatial, body_out.producer, body_out.channels, body_out.spatial
                )));
            }
        }
    }
    Ok(body_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_vgg16_cifar, ModelGraph};
    use crate::ops::{ConvGeometry, LayerParams};
    use crate::tensor::Tensor4;

    fn conv(id: &str, out: usize, inp: usize, g: ConvGeometry) -> Layer {
        Layer::new(
            id,
            0,
            LayerOp::Conv {
                geometry: g,
                params: LayerParams::new(Tensor4::zeros([out, inp, g.kernel, g.kernel]), vec![0.0; out]).unwrap(),
            },
        )
    }

    fn single_conv_graph(size: usize, g: ConvGeometry) -> ModelGraph {
        let mut graph = ModelGraph::new("one", [1, size, size], 1);
        graph.push_layer(conv("conv_1", 1, 1, g));
        graph.push_layer(Layer::new("pool", 0, LayerOp::AvgPool));
        graph
    }

    #[test]
    fn same_padding_keeps_size() {
        let g = infer_shapes(&single_conv_graph(32, ConvGeometry::new(3, 1, 1))).unwrap();
        assert_eq!(g.layer("conv_1").unwrap().shape.unwrap().out_spatial, (32, 32));
    }

    #[test]
    fn strided_valid_conv() {
        let g = infer_shapes(&single_conv_graph(9, ConvGeometry::new(3, 2, 0))).unwrap();
        assert_eq!(g.layer("conv_1").unwrap().shape.unwrap().out_spatial, (4, 4));
    }

    #[test]
    fn vgg16_conv8_is_4x4() {
        let g = infer_shapes(&build_vgg16_cifar(0)).unwrap();
        let s = g.layer("conv_8").unwrap().shape.unwrap();
        assert_eq!(s.out_spatial, (4, 4));
        assert_eq!(s.out_channels, 512);
    }

    #[test]
    fn channel_mismatch_names_both_layers() {
        let g = ConvGeometry::new(3, 1, 1);
        let mut graph = ModelGraph::new("bad", [3, 8, 8], 4);
        graph.push_layer(conv("conv_a", 8, 3, g));
        graph.push_layer(conv("conv_b", 4, 6, g));
        graph.push_layer(Layer::new("pool", 0, LayerOp::AvgPool));
        let msg = infer_shapes(&graph).unwrap_err().to_string();
        assert!(msg.contains("conv_a") && msg.contains("conv_b"), "{msg}");
    }

    #[test]
    fn wrong_logit_count_is_rejected() {
        let mut graph = single_conv_graph(4, ConvGeometry::new(1, 1, 0));
        graph.class_count = 3;
        assert!(matches!(infer_shapes(&graph), Err(Error::Validation(_))));
    }
}
