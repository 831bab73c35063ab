//! FLOP and parameter accounting.
//!
//! One multiply-accumulate in a conv or fully connected layer counts as one
//! FLOP. Biases, batch-norm, activations and pooling are not counted, and the
//! parameter column counts weights only.

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerOp, ModelGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRow {
    pub layer: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub out_spatial: (usize, usize),
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
    pub total_flops: u64,
    pub total_params: u64,
}

/// Per-layer costs of every conv and linear layer, in execution order.
pub fn count_flops(graph: &ModelGraph) -> Result<FlopReport> {
    let mut rows = Vec::new();
    for layer in graph.layers() {
        let (flops, params) = match &layer.op {
            LayerOp::Conv { .. } | LayerOp::Linear { .. } => {
                let shape = layer.shape.ok_or_else(|| {
                    Error::State(format!("shapes of {} are not inferred; run infer_shapes first", layer.id))
                })?;
                let weights = layer.dense_params().map(|p| p.weights.len() as u64).unwrap_or(0);
                let (oh, ow) = shape.out_spatial;
                (weights * (oh * ow) as u64, weights)
            }
            _ => continue,
        };
        let shape = layer.shape.expect("checked above");
        rows.push(FlopRow {
            layer: layer.id.clone(),
            kind: layer.kind(),
            out_channels: shape.out_channels,
            out_spatial: shape.out_spatial,
            flops,
            params,
        });
    }
    let total_flops = rows.iter().map(|r| r.flops).sum();
    let total_params = rows.iter().map(|r| r.params).sum();
    Ok(FlopReport {
        rows,
        total_flops,
        total_params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub layer: String,
    pub baseline_flops: u64,
    pub pruned_flops: u64,
    pub flops_reduction: f64,
    pub baseline_params: u64,
    pub pruned_params: u64,
    pub params_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub rows: Vec<ReductionRow>,
    pub total_flops_reduction: f64,
    pub total_params_reduction: f64,
}

fn fraction_removed(baseline: u64, pruned: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - pruned as f64 / baseline as f64
    }
}

/// `1 - pruned / baseline` per layer and overall. Both reports must list the
/// same layers in the same order.
pub fn flop_reduction(baseline: &FlopReport, pruned: &FlopReport) -> Result<ReductionReport> {
    if baseline.rows.len() != pruned.rows.len()
        || baseline.rows.iter().zip(&pruned.rows).any(|(a, b)| a.layer != b.layer)
    {
        let ids = |r: &FlopReport| r.rows.iter().map(|x| x.layer.as_str()).collect::<Vec<_>>().join(",");
        return Err(Error::Validation(format!(
            "FLOP reports cover different layers: [{}] vs [{}]",
            ids(baseline),
            ids(pruned)
        )));
    }
    let rows = baseline
        .rows
        .iter()
        .zip(&pruned.rows)
        .map(|(b, p)| ReductionRow {
            layer: b.layer.clone(),
            baseline_flops: b.flops,
            pruned_flops: p.flops,
            flops_reduction: fraction_removed(b.flops, p.flops),
            baseline_params: b.params,
            pruned_params: p.params,
            params_reduction: fraction_removed(b.params, p.params),
        })
        .collect();
    Ok(ReductionReport {
        rows,
        total_flops_reduction: fraction_removed(baseline.total_flops, pruned.total_flops),
        total_params_reduction: fraction_removed(baseline.total_params, pruned.total_params),
    })
}
