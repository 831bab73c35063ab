use std::collections::BTreeSet;

use super::topology::propagate;
use super::PrunePlan;
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, LayerOp, ModelGraph};
use crate::train::require_inferred;

/// Checks that `plan` is exactly what its filter removals imply for `graph`.
pub fn validate_plan(graph: &ModelGraph, plan: &PrunePlan) -> Result<()> {
    require_inferred(graph)?;
    let expected = propagate(graph, &plan.removed_filters, true)?;
    if expected != *plan {
        return Err(Error::Validation(format!(
            "plan does not match graph {}: its derived removals differ from the ones recorded",
            graph.name
        )));
    }
    Ok(())
}

fn kept(n: usize, removed: Option<&BTreeSet<usize>>) -> Vec<usize> {
    match removed {
        Some(r) => (0..n).filter(|i| !r.contains(i)).collect(),
        None => (0..n).collect(),
    }
}

fn retain<T: Copy>(v: &[T], keep: &[usize]) -> Vec<T> {
    keep.iter().map(|&i| v[i]).collect()
}

/// Builds the smaller dense model: pruned filters, the kernels that read
/// them, their batch-norm entries and linear columns are physically removed.
/// Surviving weights are copied unchanged.
pub fn apply_plan(graph: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    validate_plan(graph, plan)?;
    let mut out = graph.clone();
    for layer in out.layers_mut() {
        let Some(shape) = layer.shape else { continue };
        match &mut layer.op {
            LayerOp::Conv { params, .. } => {
                let rows = kept(shape.out_channels, plan.removed_filters.get(&layer.id));
                let cols = kept(shape.in_channels, plan.induced_inputs.get(&layer.id));
                params.weights = params.weights.select(&rows, &cols);
                params.bias = retain(&params.bias, &rows);
            }
            LayerOp::BatchNorm { params } => {
                let keep = kept(params.channels(), plan.bn_removals.get(&layer.id));
                params.gamma = retain(&params.gamma, &keep);
                params.beta = retain(&params.beta, &keep);
                params.running_mean = retain(&params.running_mean, &keep);
                params.running_var = retain(&params.running_var, &keep);
            }
            LayerOp::Linear { params } => {
                let [n_out, n_in, _, _] = params.weights.dims();
                let rows: Vec<usize> = (0..n_out).collect();
                let cols = kept(n_in, plan.linear_columns.get(&layer.id));
                params.weights = params.weights.select(&rows, &cols);
            }
            _ => {}
        }
    }
    // Shapes are re-derived from the new weights.
    infer_shapes(&out)
}

/// Same-shape model in which every pruned filter's influence is zeroed.
pub(crate) fn mask_unchecked(graph: &ModelGraph, plan: &PrunePlan) -> ModelGraph {
    let mut out = graph.clone();
    for layer in out.layers_mut() {
        match &mut layer.op {
            LayerOp::Conv { params, .. } => {
                let w = &mut params.weights;
                let [_, n_in, _, _] = w.dims();
                let plane = w.plane_len();
                if let Some(rows) = plan.removed_filters.get(&layer.id) {
                    for &j in rows {
                        let off = w.offset(j, 0, 0, 0);
                        w.data_mut()[off..off + n_in * plane].fill(0.0);
                        params.bias[j] = 0.0;
                    }
                }
                if let Some(cols) = plan.induced_inputs.get(&layer.id) {
                    for j in 0..w.dims()[0] {
                        for &c in cols {
                            let off = w.offset(j, c, 0, 0);
                            w.data_mut()[off..off + plane].fill(0.0);
                        }
                    }
                }
            }
            LayerOp::BatchNorm { params } => {
                if let Some(ch) = plan.bn_removals.get(&layer.id) {
                    for &c in ch {
                        params.gamma[c] = 0.0;
                        params.beta[c] = 0.0;
                    }
                }
            }
            LayerOp::Linear { params } => {
                if let Some(cols) = plan.linear_columns.get(&layer.id) {
                    let w = &mut params.weights;
                    let n_in = w.dims()[1];
                    for row in w.data_mut().chunks_mut(n_in) {
                        for &c in cols {
                            row[c] = 0.0;
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Verification twin of [`apply_plan`]: keeps every tensor's shape but zeroes
/// pruned filters and biases, their batch-norm scale and shift, the kernels
/// that read them and the matching linear columns.
pub fn mask_equivalent(graph: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    validate_plan(graph, plan)?;
    Ok(mask_unchecked(graph, plan))
}
