//! Filter pruning: scoring, plan construction and the structural rewrite.

mod criterion;
mod plan;
mod rewrite;
mod topology;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use criterion::{score_filters, Criterion, FilterScore, CRITERION_NAMES};
pub use plan::{build_plan, pruned_count, validate_ratios, LayerRatios, PruneStrategy};
pub use rewrite::{apply_plan, mask_equivalent, validate_plan};
pub use topology::{conv_roles, ConvRole};

/// Everything removed by one pruning step. Only layers with at least one
/// removal are listed; every index set is sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Output filters removed per conv layer.
    pub removed_filters: BTreeMap<String, BTreeSet<usize>>,
    /// Input channels (kernel slices) removed per conv layer as a consequence.
    pub induced_inputs: BTreeMap<String, BTreeSet<usize>>,
    /// Channels removed per batch-norm layer.
    pub bn_removals: BTreeMap<String, BTreeSet<usize>>,
    /// Flattened input columns removed per linear layer.
    pub linear_columns: BTreeMap<String, BTreeSet<usize>>,
    /// Channels removed on both paths of each residual block.
    pub couplings: BTreeMap<String, BTreeSet<usize>>,
    /// Number of filters removed per conv layer.
    pub m: BTreeMap<String, usize>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.removed_filters.is_empty()
    }

    pub fn removed(&self, layer: &str) -> Option<&BTreeSet<usize>> {
        self.removed_filters.get(layer)
    }
}

pub const PLAN_FORMAT_VERSION: u32 = 1;

/// Human-readable record of a plan and how it was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub format_version: u32,
    pub model: String,
    pub criterion: Criterion,
    pub strategy: PruneStrategy,
    pub ratios: LayerRatios,
    pub plan: PrunePlan,
}

impl PlanDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan documents always serialize")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        let doc: PlanDocument = serde_json::from_str(text).map_err(|e| crate::FormatError::Manifest {
            path: "plan document".into(),
            message: e.to_string(),
        })?;
        if doc.format_version != PLAN_FORMAT_VERSION {
            return Err(crate::FormatError::VersionMismatch {
                found: doc.format_version,
                expected: PLAN_FORMAT_VERSION,
            }
            .into());
        }
        Ok(doc)
    }
}
