//! Mini-batch SGD training and evaluation.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Samples};
use crate::error::{Error, Result};
use crate::graph::{LayerOp, ModelGraph};
use crate::ops::{self, SgdConfig};
use crate::runtime::{self, ParamGrad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` at each listed epoch (0-based).
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, gamma } => {
                base * gamma.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

/// Tuned for the bundled synthetic task: the strong weight decay is what
/// makes filter norms separate enough for norm-based ranking to matter.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-2,
            batch_size: 16,
            seed: 0,
            lr_schedule: LrSchedule::Step {
                milestones: vec![10],
                gamma: 0.1,
            },
        }
    }
}

impl TrainConfig {
    /// Retraining defaults: constant rate 0.001 with momentum 0.9.
    pub fn retrain(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            seed,
            lr_schedule: LrSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Highest validation accuracy over all epochs, if any ran.
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_accuracy).reduce(f64::max)
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }
}

pub(crate) fn require_inferred(graph: &ModelGraph) -> Result<()> {
    match graph.layers().iter().find(|l| l.shape.is_none()) {
        Some(l) => Err(Error::State(format!("{}: shapes are not inferred", l.id))),
        None => Ok(()),
    }
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(graph: &ModelGraph, samples: &Samples, batch_size: usize) -> Result<f64> {
    require_inferred(graph)?;
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty sample set".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = samples.gather(chunk);
        let logits = runtime::forward(graph, &x)?;
        correct += ops::predictions(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Momentum buffers keyed by layer id.
#[derive(Debug, Clone, Default)]
struct Sgd {
    velocity: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Sgd {
    fn step(&mut self, graph: &mut ModelGraph, grads: &HashMap<String, ParamGrad>, cfg: SgdConfig) -> Result<()> {
        for layer in graph.layers_mut() {
            let Some(grad) = grads.get(&layer.id) else { continue };
            let id = layer.id.clone();
            match (&mut layer.op, grad) {
                (LayerOp::Conv { params, .. } | LayerOp::Linear { params }, ParamGrad::Dense { weights, bias }) => {
                    let (vw, vb) = self
                        .velocity
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; weights.len()], vec![0.0; bias.len()]));
                    ops::sgd_step(params.weights.data_mut(), weights, vw, cfg)?;
                    ops::sgd_step(&mut params.bias, bias, vb, cfg)?;
                }
                (LayerOp::BatchNorm { params }, ParamGrad::BatchNorm { gamma, beta }) => {
                    let (vg, vb) = self
                        .velocity
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; gamma.len()], vec![0.0; beta.len()]));
                    ops::sgd_step(&mut params.gamma, gamma, vg, cfg)?;
                    ops::sgd_step(&mut params.beta, beta, vb, cfg)?;
                }
                _ => return Err(Error::Invariant(format!("{}: gradient kind does not match layer", layer.id))),
            }
        }
        Ok(())
    }
}

/// Trains in place. Every epoch reshuffles the training split with an RNG
/// seeded from `cfg.seed` and then measures accuracy on the test split.
/// Trailing batches of a single sample are skipped, since batch statistics
/// are undefined for them.
pub fn train(graph: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    require_inferred(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::default();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.rate(cfg.lr, epoch);
        let step_cfg = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() > 1 || cfg.batch_size == 1) {
            let (x, y) = data.train.gather(batch);
            let (logits, tape) = runtime::forward_train(graph, &x)?;
            let (loss, grad) = ops::softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!("training loss became non-finite in epoch {epoch}")));
            }
            correct += ops::predictions(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            let grads = runtime::backward(graph, &tape, grad)?;
            sgd.step(graph, &grads.by_layer, step_cfg)?;
        }
        let val_accuracy = evaluate(graph, &data.test, cfg.batch_size.max(64))?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_accuracy,
        });
    }
    Ok(history)
}
