use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerOp, ModelGraph};
use crate::ops::BatchNormParams;

/// Re-draws every parameter from scratch: He-normal weights
/// (`std = sqrt(2 / fan_in)`), zero biases, identity batch-norm.
///
/// Layers are visited in execution order, so the result depends only on the
/// architecture and `seed`.
pub fn initialize(graph: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in graph.layers_mut() {
        match &mut layer.op {
            LayerOp::Conv { params, .. } | LayerOp::Linear { params } => {
                let [_, fan_in_c, kh, kw] = params.weights.dims();
                let fan_in = (fan_in_c * kh * kw).max(1) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                for w in params.weights.data_mut() {
                    *w = normal.sample(&mut rng) as f32;
                }
                params.bias.fill(0.0);
            }
            LayerOp::BatchNorm { params } => *params = BatchNormParams::identity(params.channels()),
            _ => {}
        }
    }
}
