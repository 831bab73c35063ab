//! Experiment configuration: one TOML file per experiment, with command-line
//! flags overriding individual fields.

use std::path::Path;

use prunekit::data::DatasetSource;
use prunekit::graph::TinyCnnConfig;
use prunekit::pruning::{Criterion, LayerRatios, PruneStrategy};
use prunekit::strategy::StageRates;
use prunekit::train::TrainConfig;
use prunekit::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Drives model initialization, data order, retraining and the random
    /// criterion. Any `seed` inside `train` or `retrain` is replaced by it.
    pub seed: u64,
    pub data: DatasetSource,
    /// Architecture used by `--arch tiny`.
    pub tiny: TinyCnnConfig,
    pub train: TrainConfig,
    pub retrain: TrainConfig,
    pub prune: PruneSection,
    pub sensitivity: SweepSection,
    pub compare: CompareSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DatasetSource::default(),
            tiny: TinyCnnConfig::default(),
            train: TrainConfig::default(),
            retrain: TrainConfig::retrain(12, 0),
            prune: PruneSection::default(),
            sensitivity: SweepSection::default(),
            compare: CompareSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub criterion: String,
    pub strategy: PruneStrategy,
    /// Per-layer ratios; merged with `stage_rates` when both are given, the
    /// per-layer value winning.
    pub ratios: LayerRatios,
    pub stage_rates: Option<StageRates>,
    /// Samples used by activation criteria.
    pub activation_samples: usize,
    /// Retraining epochs after pruning; 0 skips retraining.
    pub retrain_epochs: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            criterion: "l1".into(),
            strategy: PruneStrategy::Independent,
            ratios: LayerRatios::new(),
            stage_rates: None,
            activation_samples: 100,
            retrain_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub criterion: String,
    pub ratios: Vec<f64>,
    /// Defaults to every prunable layer.
    pub layers: Option<Vec<String>>,
    pub retrain_epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            criterion: "l1".into(),
            ratios: (1..10).map(|i| i as f64 / 10.0).collect(),
            layers: None,
            retrain_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub criteria: Vec<String>,
    pub ratios: Vec<f64>,
    pub layers: Option<Vec<String>>,
    pub random_seeds: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            criteria: ["l1", "l2", "largest", "random"].map(String::from).to_vec(),
            ratios: (1..10).map(|i| i as f64 / 10.0).collect(),
            layers: None,
            random_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 100 }
    }
}

impl Config {
    /// A relative dataset path is taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::manifest::at(path))?;
        let mut c: Config = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DatasetSource::Cifar10 { path: Some(dir) } = &mut c.data {
            if dir.is_relative() {
                let base = std::path::absolute(path)?;
                *dir = base.parent().unwrap_or(Path::new("/")).join(&*dir);
            }
        }
        Ok(c)
    }

    /// Applies the global seed to every seeded component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.retrain.seed = self.seed;
        self
    }

    pub fn criterion(&self, name: &str) -> Result<Criterion> {
        Criterion::from_name(name, self.seed, self.prune.activation_samples)
    }

    /// Retraining config with the epoch count of a section.
    pub fn retrain_for(&self, epochs: usize) -> Option<TrainConfig> {
        (epochs > 0).then(|| TrainConfig {
            epochs,
            ..self.retrain.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: Config = toml::from_str("").unwrap();
        assert_eq!(c, Config::default());
    }

    #[test]
    fn sections_parse() {
        let c: Config = toml::from_str::<Config>(
            r#"
            seed = 4
            [data]
            source = "synthetic"
            size = 8
            train_count = 50
            [train]
            epochs = 2
            [prune]
            criterion = "l2"
            strategy = "greedy"
            ratios = { conv_1 = 0.5 }
            [prune.stage_rates]
            p = [0.5, 0.0, 0.25]
            skip = ["conv_3"]
            "#,
        )
        .unwrap()
        .with_seed(None);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.retrain.seed, 4);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.prune.strategy, PruneStrategy::Greedy);
        assert_eq!(c.prune.ratios["conv_1"], 0.5);
        assert_eq!(c.prune.stage_rates.unwrap().p, vec![0.5, 0.0, 0.25]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<Config>("colour = 1\n").is_err());
    }

    #[test]
    fn flag_seed_wins() {
        let c = Config::default().with_seed(Some(9));
        assert_eq!((c.seed, c.train.seed, c.retrain.seed), (9, 9, 9));
    }
}
