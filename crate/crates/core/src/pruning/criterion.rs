//! Filter importance scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::runtime;

/// How filters are ranked. Smaller scores are pruned first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// Sum of absolute kernel weights.
    L1,
    /// Euclidean norm of the filter.
    L2,
    /// Prunes the filters with the largest l1 norm first.
    Largest,
    /// Seeded uniform permutation.
    Random { seed: u64 },
    /// Mean over samples of each feature map's mean.
    ActMeanMean { samples: usize },
    /// Mean over samples of each feature map's standard deviation.
    ActMeanStd { samples: usize },
    /// Mean over samples of each feature map's l1 norm.
    ActMeanL1 { samples: usize },
    /// Mean over samples of each feature map's l2 norm.
    ActMeanL2 { samples: usize },
    /// Variance over samples of each feature map's l2 norm.
    ActVarL2 { samples: usize },
}

pub const CRITERION_NAMES: [&str; 9] = [
    "l1",
    "l2",
    "largest",
    "random",
    "act_mean_mean",
    "act_mean_std",
    "act_mean_l1",
    "act_mean_l2",
    "act_var_l2",
];

impl Criterion {
    /// Builds a criterion from its name; `seed` is used by `random` and
    /// `samples` by the activation kinds.
    pub fn from_name(name: &str, seed: u64, samples: usize) -> Result<Self> {
        Ok(match name {
            "l1" => Criterion::L1,
            "l2" => Criterion::L2,
            "largest" => Criterion::Largest,
            "random" => Criterion::Random { seed },
            "act_mean_mean" => Criterion::ActMeanMean { samples },
            "act_mean_std" => Criterion::ActMeanStd { samples },
            "act_mean_l1" => Criterion::ActMeanL1 { samples },
            "act_mean_l2" => Criterion::ActMeanL2 { samples },
            "act_var_l2" => Criterion::ActVarL2 { samples },
            other => {
                return Err(Error::Config(format!(
                    "unknown criterion `{other}`; expected one of {}",
                    CRITERION_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::L1 => "l1",
            Criterion::L2 => "l2",
            Criterion::Largest => "largest",
            Criterion::Random { .. } => "random",
            Criterion::ActMeanMean { .. } => "act_mean_mean",
            Criterion::ActMeanStd { .. } => "act_mean_std",
            Criterion::ActMeanL1 { .. } => "act_mean_l1",
            Criterion::ActMeanL2 { .. } => "act_mean_l2",
            Criterion::ActVarL2 { .. } => "act_var_l2",
        }
    }

    /// Sample count for activation kinds.
    pub fn sample_count(&self) -> Option<usize> {
        match *self {
            Criterion::ActMeanMean { samples }
            | Criterion::ActMeanStd { samples }
            | Criterion::ActMeanL1 { samples }
            | Criterion::ActMeanL2 { samples }
            | Criterion::ActVarL2 { samples } => Some(samples),
            _ => None,
        }
    }

    pub fn needs_data(&self) -> bool {
        self.sample_count().is_some()
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    /// Parses a bare name with seed 0 and 100 activation samples.
    fn from_str(s: &str) -> Result<Self> {
        Criterion::from_name(s, 0, 100)
    }
}

/// Scores of one layer's filters and their pruning order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub layer: String,
    pub scores: Vec<f64>,
    /// Filter indices sorted by ascending score, ties by ascending index.
    pub order: Vec<usize>,
}

impl FilterScore {
    pub fn new(layer: impl Into<String>, scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        Self {
            layer: layer.into(),
            scores,
            order,
        }
    }

    /// The `m` filters that come first in pruning order.
    pub fn lowest(&self, m: usize) -> BTreeSet<usize> {
        self.order.iter().take(m).copied().collect()
    }
}

fn weight_scores(graph: &ModelGraph, layer: &str, criterion: Criterion, excluded: &BTreeSet<usize>) -> Result<Vec<f64>> {
    let l = graph
        .layer(layer)
        .ok_or_else(|| Error::Validation(format!("no layer `{layer}` in {}", graph.name)))?;
    if !l.is_conv() {
        return Err(Error::Validation(format!("`{layer}` is a {} layer, not a convolution", l.kind())));
    }
    let w = &l.dense_params().expect("conv has params").weights;
    let [n_out, n_in, _, _] = w.dims();
    let plane = w.plane_len();
    let mut scores = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let mut sum = 0.0f64;
        for c in (0..n_in).filter(|c| !excluded.contains(c)) {
            let off = w.offset(j, c, 0, 0);
            for &v in &w.data()[off..off + plane] {
                sum += match criterion {
                    Criterion::L2 => (v as f64) * (v as f64),
                    _ => (v as f64).abs(),
                };
            }
        }
        scores.push(match criterion {
            Criterion::L2 => sum.sqrt(),
            Criterion::Largest => -sum,
            _ => sum,
        });
    }
    Ok(scores)
}

fn random_scores(n: usize, seed: u64, layer: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Each layer gets its own stream so neighbouring layers are independent.
    rng.set_stream(layer.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut scores = vec![0.0; n];
    for (rank, &j) in perm.iter().enumerate() {
        scores[j] = rank as f64;
    }
    scores
}

/// Per-channel running sums of per-sample statistics.
#[derive(Debug, Clone, Default)]
struct MapStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
    l2_sq: Vec<f64>,
    count: usize,
}

impl MapStats {
    fn accumulate(&mut self, out: &crate::Tensor4) {
        let [batch, ch, _, _] = out.dims();
        if self.mean.is_empty() {
            *self = MapStats {
                mean: vec![0.0; ch],
                std: vec![0.0; ch],
                l1: vec![0.0; ch],
                l2: vec![0.0; ch],
                l2_sq: vec![0.0; ch],
                count: 0,
            };
        }
        let plane = out.plane_len();
        for b in 0..batch {
            for j in 0..ch {
                let off = out.offset(b, j, 0, 0);
                let map = &out.data()[off..off + plane];
                let (mut s, mut sa, mut sq) = (0.0f64, 0.0f64, 0.0f64);
                for &v in map {
                    let v = v as f64;
                    s += v;
                    sa += v.abs();
                    sq += v * v;
                }
                let n = plane as f64;
                let mean = s / n;
                let var = map.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let l2 = sq.sqrt();
                self.mean[j] += mean;
                self.std[j] += var.sqrt();
                self.l1[j] += sa;
                self.l2[j] += l2;
                self.l2_sq[j] += l2 * l2;
            }
        }
        self.count += batch;
    }

    fn finish(&self, criterion: Criterion) -> Vec<f64> {
        let n = self.count as f64;
        match criterion {
            Criterion::ActMeanMean { .. } => self.mean.iter().map(|v| v / n).collect(),
            Criterion::ActMeanStd { .. } => self.std.iter().map(|v| v / n).collect(),
            Criterion::ActMeanL1 { .. } => self.l1.iter().map(|v| v / n).collect(),
            Criterion::ActMeanL2 { .. } => self.l2.iter().map(|v| v / n).collect(),
            Criterion::ActVarL2 { .. } => self
                .l2
                .iter()
                .zip(&self.l2_sq)
                .map(|(s, sq)| {
                    let m = s / n;
                    (sq / n - m * m).max(0.0)
                })
                .collect(),
            _ => unreachable!("weight criteria do not use activations"),
        }
    }
}

const ACTIVATION_BATCH: usize = 50;

/// Activation-based scores for several conv layers from one set of forward
/// passes over the first `N` samples. Statistics are taken on the raw conv
/// output, before batch-norm and the non-linearity.
pub(crate) fn activation_scores(
    graph: &ModelGraph,
    layers: &[String],
    criterion: Criterion,
    data: Option<&Samples>,
) -> Result<HashMap<String, Vec<f64>>> {
    let Some(n) = criterion.sample_count() else {
        return Err(Error::Invariant(format!("{criterion} is not an activation criterion")));
    };
    let data = data.ok_or_else(|| Error::Config(format!("criterion {criterion} needs a dataset")))?;
    if n == 0 || n > data.len() {
        return Err(Error::Config(format!(
            "criterion {criterion} needs 1..={} samples, got {n}",
            data.len()
        )));
    }
    for id in layers {
        match graph.layer(id) {
            Some(l) if l.is_conv() => {}
            Some(l) => return Err(Error::Validation(format!("`{id}` is a {} layer, not a convolution", l.kind()))),
            None => return Err(Error::Validation(format!("no layer `{id}` in {}", graph.name))),
        }
    }
    let mut stats: HashMap<String, MapStats> = layers.iter().map(|id| (id.clone(), MapStats::default())).collect();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(ACTIVATION_BATCH) {
        let (x, _) = data.gather(chunk);
        runtime::forward_observed(graph, &x, &mut |layer, out| {
            if let Some(s) = stats.get_mut(&layer.id) {
                s.accumulate(out);
            }
        })?;
    }
    Ok(stats.into_iter().map(|(id, s)| (id, s.finish(criterion))).collect())
}

/// Scores every filter of a set of conv layers. Input channels listed in
/// `excluded` for a layer do not contribute to weight-based scores.
pub(crate) fn score_layers(
    graph: &ModelGraph,
    layers: &[String],
    criterion: Criterion,
    data: Option<&Samples>,
    excluded: &BTreeMap<String, BTreeSet<usize>>,
) -> Result<Vec<FilterScore>> {
    let empty = BTreeSet::new();
    if criterion.needs_data() {
        let mut by_layer = activation_scores(graph, layers, criterion, data)?;
        return Ok(layers
            .iter()
            .map(|id| FilterScore::new(id.clone(), by_layer.remove(id).expect("scored every layer")))
            .collect());
    }
    layers
        .iter()
        .map(|id| {
            let scores = match criterion {
                Criterion::Random { seed } => {
                    let n = weight_scores(graph, id, Criterion::L1, &empty)?.len();
                    random_scores(n, seed, id)
                }
                _ => weight_scores(graph, id, criterion, excluded.get(id).unwrap_or(&empty))?,
            };
            Ok(FilterScore::new(id.clone(), scores))
        })
        .collect()
}

/// Scores the filters of one conv layer. Activation criteria need `data` and
/// use its first `N` samples.
pub fn score_filters(graph: &ModelGraph, layer: &str, criterion: Criterion, data: Option<&Samples>) -> Result<FilterScore> {
    let mut v = score_layers(graph, &[layer.to_string()], criterion, data, &BTreeMap::new())?;
    Ok(v.remove(0))
}
