use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::criterion::score_layers;
use super::rewrite::mask_unchecked;
use super::topology::{cascade_targets, conv_roles, propagate, ConvRole};
use super::{Criterion, PrunePlan};
use crate::data::Samples;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::train::require_inferred;

/// Fraction of filters to remove, keyed by conv layer id. Layers not listed
/// are left alone.
pub type LayerRatios = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStrategy {
    /// Every layer is scored on the original weights.
    #[default]
    Independent,
    /// Layers are scored input to output, ignoring kernels that read channels
    /// already removed upstream.
    Greedy,
}

impl std::str::FromStr for PruneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(PruneStrategy::Independent),
            "greedy" => Ok(PruneStrategy::Greedy),
            other => Err(Error::Config(format!("unknown strategy `{other}`; expected independent or greedy"))),
        }
    }
}

/// Checks that every ratio names a conv layer and lies in `[0, 1)`.
pub fn validate_ratios(graph: &ModelGraph, ratios: &LayerRatios) -> Result<()> {
    for (id, &r) in ratios {
        match graph.layer(id) {
            Some(l) if l.is_conv() => {}
            Some(l) => return Err(Error::Validation(format!("ratio given for `{id}`, a {} layer", l.kind()))),
            None => return Err(Error::Validation(format!("ratio given for unknown layer `{id}`"))),
        }
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Validation(format!("pruning ratio for {id} must be in [0, 1), got {r}")));
        }
    }
    Ok(())
}

/// A unit of selection: one free conv, or a projection shortcut together
/// with the convs that must drop the same indices.
struct Target {
    scored: String,
    ratio: f64,
    followers: Vec<String>,
}

fn targets(graph: &ModelGraph, ratios: &LayerRatios) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    for (id, role) in conv_roles(graph) {
        match role {
            ConvRole::Free => {
                let ratio = ratios.get(&id).copied().unwrap_or(0.0);
                out.push(Target {
                    scored: id,
                    ratio,
                    followers: Vec::new(),
                });
            }
            ConvRole::CoupledShortcut { block } => {
                let b = graph.blocks().find(|b| b.id == block).expect("role names an existing block");
                let second = b.second_conv().expect("inferred block has two convs").id.clone();
                let ratio = ratios.get(&id).or_else(|| ratios.get(&second)).copied().unwrap_or(0.0);
                let mut followers = vec![second];
                if ratio > 0.0 {
                    followers.extend(cascade_targets(graph, &block)?);
                }
                out.push(Target {
                    scored: id,
                    ratio,
                    followers,
                });
            }
            ConvRole::Fixed | ConvRole::CoupledSecond { .. } => {}
        }
    }
    Ok(out)
}

/// `floor(ratio * n)`, tolerating the rounding error of decimal ratios such
/// as `0.29 * 100`.
pub fn pruned_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n.saturating_sub(1))
}

fn filter_count(graph: &ModelGraph, id: &str) -> usize {
    graph.layer(id).and_then(|l| l.shape).map(|s| s.out_channels).unwrap_or(0)
}

fn assign(removed: &mut BTreeMap<String, BTreeSet<usize>>, target: &Target, chosen: BTreeSet<usize>) -> Result<()> {
    if chosen.is_empty() {
        return Ok(());
    }
    for id in target.followers.iter().chain(std::iter::once(&target.scored)) {
        if let Some(prev) = removed.get(id) {
            if *prev != chosen {
                return Err(Error::Invariant(format!(
                    "{id} is asked to drop {chosen:?} but already drops {prev:?}"
                )));
            }
        }
        removed.insert(id.clone(), chosen.clone());
    }
    Ok(())
}

/// Selects `floor(ratio * n)` lowest-ranked filters per layer and derives every
/// consequence of removing them.
///
/// Second convs of blocks with identity shortcuts, and plain convs that feed
/// such a block, are never pruned; ratios given for them are ignored. In a
/// block with a projection shortcut the 1x1 shortcut filters are scored (ratio
/// looked up under the shortcut id, falling back to the second conv id) and
/// the chosen indices are removed from the shortcut, the block's second conv
/// and the second convs of the identity blocks that follow it.
pub fn build_plan(
    graph: &ModelGraph,
    ratios: &LayerRatios,
    criterion: Criterion,
    strategy: PruneStrategy,
    data: Option<&Samples>,
) -> Result<PrunePlan> {
    require_inferred(graph)?;
    validate_ratios(graph, ratios)?;
    if criterion.needs_data() && data.is_none() {
        return Err(Error::Config(format!("criterion {criterion} needs a dataset")));
    }
    let targets: Vec<Target> = targets(graph, ratios)?
        .into_iter()
        .filter(|t| pruned_count(t.ratio, filter_count(graph, &t.scored)) > 0)
        .collect();
    let select = |t: &Target, score: &super::FilterScore| {
        score.lowest(pruned_count(t.ratio, score.scores.len()))
    };
    let mut removed = BTreeMap::new();
    let greedy = strategy == PruneStrategy::Greedy && !matches!(criterion, Criterion::Random { .. });
    if greedy {
        for t in &targets {
            let partial = propagate(graph, &removed, false)?;
            let ids = [t.scored.clone()];
            let scores = if criterion.needs_data() {
                if partial.is_empty() {
                    score_layers(graph, &ids, criterion, data, &BTreeMap::new())?
                } else {
                    score_layers(&mask_unchecked(graph, &partial), &ids, criterion, data, &BTreeMap::new())?
                }
            } else {
                score_layers(graph, &ids, criterion, data, &partial.induced_inputs)?
            };
            assign(&mut removed, t, select(t, &scores[0]))?;
        }
    } else {
        let ids: Vec<String> = targets.iter().map(|t| t.scored.clone()).collect();
        let scores = if ids.is_empty() {
            Vec::new()
        } else {
            score_layers(graph, &ids, criterion, data, &BTreeMap::new())?
        };
        for (t, s) in targets.iter().zip(&scores) {
            assign(&mut removed, t, select(t, s))?;
        }
    }
    propagate(graph, &removed, true)
}
