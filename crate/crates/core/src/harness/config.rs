//! Experiment configuration, read from and written to TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acquisition::AggregationMode;
use crate::detector::predict::InferenceConfig;
use crate::detector::NetworkConfig;
use crate::error::{MdalError, Result};
use crate::scenes::DatasetSpec;
use crate::train::OptimizerConfig;
use crate::uncertainty::ClassReduction;

/// Acquisition function used to pick the next batch of images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Random,
    Entropy,
    Coreset,
    Uncertainty(AggregationMode),
}

impl Method {
    /// Random sampling followed by every aggregation mode.
    pub fn comparison_set() -> Vec<Method> {
        std::iter::once(Method::Random)
            .chain(AggregationMode::ALL.into_iter().map(Method::Uncertainty))
            .collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Random => f.write_str("random"),
            Method::Entropy => f.write_str("entropy"),
            Method::Coreset => f.write_str("coreset"),
            Method::Uncertainty(m) => f.write_str(m.name()),
        }
    }
}

impl FromStr for Method {
    type Err = MdalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Method::Random),
            "entropy" => Ok(Method::Entropy),
            "coreset" => Ok(Method::Coreset),
            other => other.parse().map(Method::Uncertainty),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = MdalError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveLearningConfig {
    pub initial: usize,
    pub budget: usize,
    /// Number of train/evaluate rounds, the first on the initial set.
    pub cycles: usize,
    pub method: Method,
    pub class_reduction: ClassReduction,
}

impl Default for ActiveLearningConfig {
    fn default() -> Self {
        Self {
            initial: 100,
            budget: 100,
            cycles: 5,
            method: Method::Uncertainty(AggregationMode::MaxAll),
            class_reduction: ClassReduction::PredictedClass,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Write a parameter checkpoint after every cycle.
    pub save_checkpoints: bool,
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub inference: InferenceConfig,
    pub al: ActiveLearningConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            save_checkpoints: false,
            dataset: DatasetSpec::default(),
            split: SplitConfig::default(),
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            inference: InferenceConfig::default(),
            al: ActiveLearningConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MdalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            MdalError::Config(m) => MdalError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Number of train-pool scenes implied by the dataset size and split.
    pub fn train_pool_size(&self) -> usize {
        (self.dataset.n_scenes as f64 * self.split.train).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.network.validate()?;
        self.optimizer.validate()?;
        if self.seeds.is_empty() {
            return Err(MdalError::Config("at least one seed is required".into()));
        }
        if self.network.image_size != self.dataset.image_size {
            return Err(MdalError::Config(format!(
                "network image_size {} differs from dataset image_size {}",
                self.network.image_size, self.dataset.image_size
            )));
        }
        if self.network.num_classes != self.dataset.num_classes {
            return Err(MdalError::Config(format!(
                "network num_classes {} differs from dataset num_classes {}",
                self.network.num_classes, self.dataset.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.inference.conf_floor)
            || !(0.0..=1.0).contains(&self.inference.nms_iou)
        {
            return Err(MdalError::Config(
                "inference thresholds must lie in [0, 1]".into(),
            ));
        }
        if self.al.initial == 0 || self.al.cycles == 0 {
            return Err(MdalError::Config(
                "al.initial and al.cycles must be positive".into(),
            ));
        }
        let needed = self.al.initial + self.al.cycles * self.al.budget;
        if needed > self.train_pool_size() {
            return Err(MdalError::Config(format!(
                "initial {} + cycles {} × budget {} exceeds the train pool of {}",
                self.al.initial,
                self.al.cycles,
                self.al.budget,
                self.train_pool_size()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seeds = [3]\n[al]\nmethod = \"random\"\n").unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.al.method, Method::Random);
        assert_eq!(cfg.al.budget, 100);
    }

    #[test]
    fn unknown_method_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str("[al]\nmethod = \"bald\"\n").unwrap_err();
        assert!(matches!(err, MdalError::Config(_)));
    }

    #[test]
    fn oversized_budget_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.al.budget = 1000;
        assert!(cfg.validate().is_err());
    }
}
