//! Experiment orchestration: sensitivity sweeps, stage-rate pruning,
//! retraining regimes, scratch baselines and criterion comparisons.

mod report;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{initialize, ModelGraph};
use crate::pruning::{apply_plan, build_plan, conv_roles, ConvRole, Criterion, LayerRatios, PrunePlan, PruneStrategy};
use crate::train::{evaluate, require_inferred, train, History, TrainConfig};

pub use report::{
    comparison_csv, flop_csv, history_csv, reduction_csv, sensitivity_csv, COMPARISON_HEADER, FLOP_HEADER,
    HISTORY_HEADER, REDUCTION_HEADER, REPORT_FORMAT_VERSION, SENSITIVITY_HEADER,
};

const EVAL_BATCH: usize = 100;

/// One pruning rate per stage, applied to every prunable layer of the stage
/// except those listed in `skip`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageRates {
    pub p: Vec<f64>,
    pub skip: BTreeSet<String>,
    /// Also prune projection shortcuts, and with them the second convs of
    /// their blocks, at the stage rate.
    pub include_shortcuts: bool,
}

impl StageRates {
    pub fn uniform(stages: usize, p: f64) -> Self {
        Self {
            p: vec![p; stages],
            ..Self::default()
        }
    }

    /// Per-layer ratios for `graph`.
    pub fn expand(&self, graph: &ModelGraph) -> Result<LayerRatios> {
        if let Some(&bad) = self.p.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::Validation(format!("stage rates must be in [0, 1), got {bad}")));
        }
        if self.p.len() < graph.stage_count() {
            return Err(Error::Validation(format!(
                "{} has {} stages but only {} stage rates were given",
                graph.name,
                graph.stage_count(),
                self.p.len()
            )));
        }
        if let Some(id) = self.skip.iter().find(|id| graph.layer(id).is_none()) {
            return Err(Error::Validation(format!("skip list names unknown layer `{id}`")));
        }
        let mut ratios = LayerRatios::new();
        for (id, role) in conv_roles(graph) {
            let take = match role {
                ConvRole::Free => true,
                ConvRole::CoupledShortcut { .. } => self.include_shortcuts,
                ConvRole::Fixed | ConvRole::CoupledSecond { .. } => false,
            };
            if !take || self.skip.contains(&id) {
                continue;
            }
            let stage = graph.layer(&id).expect("role of an existing layer").stage;
            if self.p[stage] > 0.0 {
                ratios.insert(id, self.p[stage]);
            }
        }
        Ok(ratios)
    }
}

/// Layers a sweep can target: free convs and projection shortcuts.
pub fn prunable_layers(graph: &ModelGraph) -> Vec<String> {
    conv_roles(graph)
        .into_iter()
        .filter(|(_, r)| matches!(r, ConvRole::Free | ConvRole::CoupledShortcut { .. }))
        .map(|(id, _)| id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer: String,
    pub ratio: f64,
    pub filters_pruned: usize,
    pub filters_total: usize,
    pub accuracy: f64,
    pub accuracy_retrained: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub criterion: Criterion,
    pub baseline_accuracy: f64,
    pub rows: Vec<SensitivityRow>,
}

/// Prunes and evaluates one copy of `graph`, keeping `graph` itself intact.
fn prune_cell(
    graph: &ModelGraph,
    ratios: &LayerRatios,
    criterion: Criterion,
    strategy: PruneStrategy,
    data: &Dataset,
) -> Result<(PrunePlan, ModelGraph)> {
    let plan = build_plan(graph, ratios, criterion, strategy, Some(&data.train))?;
    let pruned = apply_plan(graph, &plan)?;
    Ok((plan, pruned))
}

/// Prunes each listed layer alone at each ratio and measures test accuracy,
/// optionally after retraining. `layers` defaults to [`prunable_layers`].
/// Cells run in parallel, each on its own copy of the model.
pub fn sensitivity_sweep(
    graph: &ModelGraph,
    layers: Option<&[String]>,
    criterion: Criterion,
    ratios: &[f64],
    data: &Dataset,
    retrain: Option<&TrainConfig>,
) -> Result<SensitivityReport> {
    require_inferred(graph)?;
    if ratios.is_empty() {
        return Err(Error::Config("the ratio grid is empty".into()));
    }
    if let Some(cfg) = retrain {
        cfg.validate()?;
    }
    let layers = match layers {
        Some(l) => l.to_vec(),
        None => prunable_layers(graph),
    };
    let baseline_accuracy = evaluate(graph, &data.test, EVAL_BATCH)?;
    let cells: Vec<(&String, f64)> = layers.iter().flat_map(|l| ratios.iter().map(move |&r| (l, r))).collect();
    let rows = cells
        .par_iter()
        .map(|&(layer, ratio)| {
            let filters_total = graph
                .layer(layer)
                .and_then(|l| l.shape)
                .map(|s| s.out_channels)
                .ok_or_else(|| Error::Validation(format!("no conv layer `{layer}` in {}", graph.name)))?;
            let ratios = LayerRatios::from([(layer.clone(), ratio)]);
            let (plan, mut pruned) = prune_cell(graph, &ratios, criterion, PruneStrategy::Independent, data)?;
            let accuracy = evaluate(&pruned, &data.test, EVAL_BATCH)?;
            let accuracy_retrained = match retrain {
                Some(cfg) => train(&mut pruned, data, cfg)?.best_val_accuracy(),
                None => None,
            };
            Ok(SensitivityRow {
                layer: layer.clone(),
                ratio,
                filters_pruned: plan.removed(layer).map_or(0, BTreeSet::len),
                filters_total,
                accuracy,
                accuracy_retrained,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport {
        criterion,
        baseline_accuracy,
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub graph: ModelGraph,
    pub plan: PrunePlan,
    /// Test accuracy right after pruning, before retraining.
    pub pruned_accuracy: f64,
    pub history: History,
}

impl PruneOutcome {
    /// Best validation accuracy during retraining, or the pruned accuracy
    /// when no retraining epochs ran.
    pub fn best_accuracy(&self) -> f64 {
        self.history.best_val_accuracy().unwrap_or(self.pruned_accuracy)
    }
}

/// Prunes all layers named in `ratios` at once, then retrains once.
pub fn prune_and_retrain(
    graph: &ModelGraph,
    ratios: &LayerRatios,
    criterion: Criterion,
    strategy: PruneStrategy,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<PruneOutcome> {
    require_inferred(graph)?;
    cfg.validate()?;
    let (plan, mut pruned) = prune_cell(graph, ratios, criterion, strategy, data)?;
    let pruned_accuracy = evaluate(&pruned, &data.test, EVAL_BATCH)?;
    let history = train(&mut pruned, data, cfg)?;
    Ok(PruneOutcome {
        graph: pruned,
        plan,
        pruned_accuracy,
        history,
    })
}

/// One-shot pruning at per-stage rates followed by a single retraining run.
pub fn prune_once_retrain(
    graph: &ModelGraph,
    rates: &StageRates,
    criterion: Criterion,
    strategy: PruneStrategy,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<PruneOutcome> {
    prune_and_retrain(graph, &rates.expand(graph)?, criterion, strategy, cfg, data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "lowercase")]
pub enum StepTarget {
    Layer(String),
    /// Every prunable layer of the given stage (0-based).
    Stage(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    #[serde(flatten)]
    pub target: StepTarget,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: ScheduleStep,
    pub plan: PrunePlan,
    pub pruned_accuracy: f64,
    pub history: History,
}

#[derive(Debug, Clone)]
pub struct IterativeOutcome {
    pub graph: ModelGraph,
    pub steps: Vec<StepRecord>,
}

impl IterativeOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.steps.last().map(|s| s.history.best_val_accuracy().unwrap_or(s.pruned_accuracy))
    }
}

fn step_ratios(graph: &ModelGraph, step: &ScheduleStep) -> Result<LayerRatios> {
    match &step.target {
        StepTarget::Layer(id) => Ok(LayerRatios::from([(id.clone(), step.ratio)])),
        StepTarget::Stage(stage) => {
            let mut p = vec![0.0; graph.stage_count().max(stage + 1)];
            p[*stage] = step.ratio;
            StageRates {
                p,
                ..StageRates::default()
            }
            .expand(graph)
        }
    }
}

/// Prunes step by step, retraining after every step. Ratios are relative to
/// the layer sizes at the time of the step. `configs` holds one training
/// config per step, or a single config reused for all of them.
pub fn iterative_prune_retrain(
    graph: &ModelGraph,
    schedule: &[ScheduleStep],
    criterion: Criterion,
    strategy: PruneStrategy,
    configs: &[TrainConfig],
    data: &Dataset,
) -> Result<IterativeOutcome> {
    if schedule.is_empty() {
        return Err(Error::Config("the pruning schedule is empty".into()));
    }
    if configs.len() != 1 && configs.len() != schedule.len() {
        return Err(Error::Config(format!(
            "{} schedule steps need 1 or {} training configs, got {}",
            schedule.len(),
            schedule.len(),
            configs.len()
        )));
    }
    let mut current = graph.clone();
    let mut steps = Vec::with_capacity(schedule.len());
    for (i, step) in schedule.iter().enumerate() {
        let cfg = &configs[i.min(configs.len() - 1)];
        let ratios = step_ratios(&current, step)?;
        let out = prune_and_retrain(&current, &ratios, criterion, strategy, cfg, data)?;
        steps.push(StepRecord {
            step: step.clone(),
            plan: out.plan,
            pruned_accuracy: out.pruned_accuracy,
            history: out.history,
        });
        current = out.graph;
    }
    Ok(IterativeOutcome { graph: current, steps })
}

/// Trains the architecture of `architecture` from a fresh initialization
/// seeded by `cfg.seed`. Returns the model and its best validation accuracy.
pub fn scratch_train(architecture: &ModelGraph, cfg: &TrainConfig, data: &Dataset) -> Result<(ModelGraph, History)> {
    require_inferred(architecture)?;
    let mut g = architecture.clone();
    initialize(&mut g, cfg.seed);
    let history = train(&mut g, data, cfg)?;
    Ok((g, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub criterion: String,
    pub layer: String,
    pub ratio: f64,
    pub filters_pruned: usize,
    pub filters_total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_accuracy: f64,
    /// Seeds averaged for the random criterion.
    pub random_seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

/// Runs one sensitivity sweep per criterion and merges the results. The
/// random criterion is averaged over `random_seeds` consecutive seeds
/// starting from its own.
pub fn compare_criteria(
    graph: &ModelGraph,
    layers: Option<&[String]>,
    criteria: &[Criterion],
    ratios: &[f64],
    data: &Dataset,
    random_seeds: usize,
) -> Result<ComparisonReport> {
    if criteria.is_empty() {
        return Err(Error::Config("no criteria to compare".into()));
    }
    let mut rows = Vec::new();
    let mut baseline_accuracy = None;
    let mut seeds_used = Vec::new();
    for &criterion in criteria {
        let runs: Vec<Criterion> = match criterion {
            Criterion::Random { seed } => {
                let seeds: Vec<u64> = (0..random_seeds.max(1) as u64).map(|i| seed.wrapping_add(i)).collect();
                seeds_used = seeds.clone();
                seeds.into_iter().map(|seed| Criterion::Random { seed }).collect()
            }
            c => vec![c],
        };
        let reports = runs
            .iter()
            .map(|&c| sensitivity_sweep(graph, layers, c, ratios, data, None))
            .collect::<Result<Vec<_>>>()?;
        baseline_accuracy.get_or_insert(reports[0].baseline_accuracy);
        for (i, first) in reports[0].rows.iter().enumerate() {
            let accuracy = reports.iter().map(|r| r.rows[i].accuracy).sum::<f64>() / reports.len() as f64;
            rows.push(ComparisonRow {
                criterion: criterion.name().to_string(),
                layer: first.layer.clone(),
                ratio: first.ratio,
                filters_pruned: first.filters_pruned,
                filters_total: first.filters_total,
                accuracy,
            });
        }
    }
    Ok(ComparisonReport {
        baseline_accuracy: baseline_accuracy.expect("at least one criterion ran"),
        random_seeds: seeds_used,
        rows,
    })
}
