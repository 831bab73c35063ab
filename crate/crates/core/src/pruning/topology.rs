//! Which convolutions may be pruned, and how removed channels flow through
//! the graph.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerOp, ModelGraph, Node, Shortcut};

use super::PrunePlan;

/// How a convolution takes part in pruning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConvRole {
    /// Scored and pruned on its own.
    Free,
    /// Never pruned: its outputs feed a parameter-free shortcut.
    Fixed,
    /// The 1x1 projection of a block; its selection also prunes the block's
    /// second conv and any identity blocks that follow.
    CoupledShortcut { block: String },
    /// A block's second conv, pruned with the indices chosen for the block's
    /// projection shortcut.
    CoupledSecond { block: String },
}

/// Plans every convolution's role, in execution order.
pub fn conv_roles(graph: &ModelGraph) -> Vec<(String, ConvRole)> {
    let mut roles = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    for node in &graph.nodes {
        match node {
            Node::Layer(layer) => {
                if layer.is_conv() {
                    roles.extend(pending.drain(..).map(|id| (id, ConvRole::Free)));
                    pending.push(layer.id.clone());
                } else if matches!(layer.op, LayerOp::Linear { .. }) {
                    roles.extend(pending.drain(..).map(|id| (id, ConvRole::Free)));
                }
            }
            Node::Block(block) => {
                // A plain conv whose output reaches this block's shortcut.
                let stem_role = if block.shortcut.is_identity_like() {
                    ConvRole::Fixed
                } else {
                    ConvRole::Free
                };
                roles.extend(pending.drain(..).map(|id| (id, stem_role.clone())));
                let convs: Vec<&Layer> = block.body.iter().filter(|l| l.is_conv()).collect();
                let second = convs.last().map(|l| l.id.clone());
                for l in &block.body {
                    if !l.is_conv() {
                        continue;
                    }
                    let role = if Some(&l.id) != second.as_ref() {
                        ConvRole::Free
                    } else if block.shortcut.is_identity_like() {
                        ConvRole::Fixed
                    } else {
                        ConvRole::CoupledSecond { block: block.id.clone() }
                    };
                    roles.push((l.id.clone(), role));
                }
                if let Some(conv) = block.shortcut_conv() {
                    roles.push((conv.id.clone(), ConvRole::CoupledShortcut { block: block.id.clone() }));
                }
            }
        }
    }
    roles.extend(pending.drain(..).map(|id| (id, ConvRole::Free)));
    roles
}

/// Second convs of the identity blocks that directly follow projection block
/// `block` (up to the next block with a different shortcut); they must drop
/// the same channels so the residual sums stay aligned.
pub(crate) fn cascade_targets(graph: &ModelGraph, block: &str) -> Result<Vec<String>> {
    let mut after = false;
    let mut out = Vec::new();
    for node in &graph.nodes {
        match node {
            Node::Block(b) if b.id == block => after = true,
            Node::Block(b) if after => match &b.shortcut {
                Shortcut::Identity => out.push(b.second_conv().expect("inferred block has two convs").id.clone()),
                Shortcut::IdentityPad { .. } => {
                    return Err(Error::Validation(format!(
                        "channels pruned in {block} would reach the zero-padded shortcut of {}",
                        b.id
                    )))
                }
                Shortcut::Projection { .. } => break,
            },
            Node::Layer(l) if after && !matches!(l.op, LayerOp::Relu | LayerOp::BatchNorm { .. } | LayerOp::MaxPool) => break,
            _ => {}
        }
    }
    Ok(out)
}

struct Walk<'a> {
    removed: &'a BTreeMap<String, BTreeSet<usize>>,
    strict: bool,
    plan: PrunePlan,
}

fn insert_nonempty(map: &mut BTreeMap<String, BTreeSet<usize>>, id: &str, set: &BTreeSet<usize>) {
    if !set.is_empty() {
        map.insert(id.to_string(), set.clone());
    }
}

impl Walk<'_> {
    fn layer(&mut self, layer: &Layer, flowing: BTreeSet<usize>) -> Result<BTreeSet<usize>> {
        let shape = layer
            .shape
            .ok_or_else(|| Error::State(format!("{}: shapes are not inferred", layer.id)))?;
        if let Some(&bad) = flowing.iter().find(|&&c| c >= shape.in_channels) {
            return Err(Error::Validation(format!(
                "{}: removed input channel {bad} is out of range for {} channels",
                layer.id, shape.in_channels
            )));
        }
        match &layer.op {
            LayerOp::Conv { .. } => {
                insert_nonempty(&mut self.plan.induced_inputs, &layer.id, &flowing);
                let out = self.removed.get(&layer.id).cloned().unwrap_or_default();
                if let Some(&bad) = out.iter().find(|&&j| j >= shape.out_channels) {
                    return Err(Error::Validation(format!(
                        "{}: filter {bad} is out of range for {} filters",
                        layer.id, shape.out_channels
                    )));
                }
                if out.len() >= shape.out_channels {
                    return Err(Error::Validation(format!(
                        "{}: plan removes all {} filters",
                        layer.id, shape.out_channels
                    )));
                }
                if !out.is_empty() {
                    self.plan.m.insert(layer.id.clone(), out.len());
                }
                insert_nonempty(&mut self.plan.removed_filters, &layer.id, &out);
                Ok(out)
            }
            LayerOp::BatchNorm { .. } => {
                insert_nonempty(&mut self.plan.bn_removals, &layer.id, &flowing);
                Ok(flowing)
            }
            LayerOp::Linear { .. } => {
                let (h, w) = shape.in_spatial;
                let plane = h * w;
                let cols: BTreeSet<usize> = flowing.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect();
                insert_nonempty(&mut self.plan.linear_columns, &layer.id, &cols);
                Ok(BTreeSet::new())
            }
            LayerOp::Relu | LayerOp::MaxPool | LayerOp::AvgPool | LayerOp::Softmax => Ok(flowing),
        }
    }

    fn nodes(&mut self, nodes: &[Node], mut flowing: BTreeSet<usize>) -> Result<BTreeSet<usize>> {
        for node in nodes {
            flowing = match node {
                Node::Layer(layer) => self.layer(layer, flowing)?,
                Node::Block(block) => {
                    let mut body = flowing.clone();
                    for layer in &block.body {
                        body = self.layer(layer, body)?;
                    }
                    let short = match &block.shortcut {
                        Shortcut::Identity => flowing,
                        Shortcut::IdentityPad { .. } => {
                            if self.strict && !flowing.is_empty() {
                                return Err(Error::Validation(format!(
                                    "{}: channels {:?} removed upstream cannot pass the zero-padded shortcut",
                                    block.id, flowing
                                )));
                            }
                            BTreeSet::new()
                        }
                        Shortcut::Projection { conv, bn } => {
                            let mut s = self.layer(conv, flowing)?;
                            if let Some(bn) = bn {
                                s = self.layer(bn, s)?;
                            }
                            s
                        }
                    };
                    if self.strict && short != body {
                        return Err(Error::Invariant(format!(
                            "residual block {}: body removes channels {:?} but shortcut removes {:?}",
                            block.id, body, short
                        )));
                    }
                    insert_nonempty(&mut self.plan.couplings, &block.id, &body);
                    body
                }
            };
        }
        Ok(flowing)
    }
}

/// Derives the full plan implied by removing `removed` filters: induced
/// input-channel removals, batch-norm entries, linear columns and block
/// couplings. Strict mode also checks that every residual sum stays aligned.
pub(crate) fn propagate(graph: &ModelGraph, removed: &BTreeMap<String, BTreeSet<usize>>, strict: bool) -> Result<PrunePlan> {
    let convs: BTreeSet<&str> = graph.layers().iter().filter(|l| l.is_conv()).map(|l| l.id.as_str()).collect();
    if let Some(id) = removed.keys().find(|id| !convs.contains(id.as_str())) {
        return Err(Error::Validation(format!("plan names `{id}`, which is not a convolution of {}", graph.name)));
    }
    let mut walk = Walk {
        removed,
        strict,
        plan: PrunePlan::default(),
    };
    walk.nodes(&graph.nodes, BTreeSet::new())?;
    Ok(walk.plan)
}
