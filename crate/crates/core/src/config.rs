//! Experiment configuration: a JSON document validated up front, covering
//! strategy, model, data, optimization and output settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DomainSpec;
use crate::losses::{AnnealSchedule, Schedules};
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    SingleSet,
    FedAvg,
    FedBn,
    TrFedDis,
}

impl StrategyName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyName::SingleSet => "singleset",
            StrategyName::FedAvg => "fedavg",
            StrategyName::FedBn => "fedbn",
            StrategyName::TrFedDis => "trfeddis",
        }
    }
}

/// Ablation toggles for the trfeddis strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default = "default_true")]
    pub dis: bool,
    #[serde(default = "default_true")]
    pub un: bool,
    #[serde(default = "default_true")]
    pub ce: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            dis: true,
            un: true,
            ce: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub target: f64,
    /// Steps to ramp from 0 to target; `null` ramps over the first half of
    /// the total training steps.
    #[serde(default)]
    pub ramp_steps: Option<u64>,
}

impl ScheduleConfig {
    pub fn resolve(&self, total_steps: u64) -> AnnealSchedule {
        AnnealSchedule::new(self.target, self.ramp_steps.unwrap_or(total_steps / 2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataConfig {
    #[serde(default = "default_data_seed")]
    pub seed: u64,
    pub num_domains: usize,
    pub per_domain_train: usize,
    pub per_domain_test: usize,
    pub image_size: usize,
    /// Explicit per-domain transforms; defaults to the built-in ladder.
    #[serde(default)]
    pub domain_specs: Option<Vec<DomainSpec>>,
}

fn default_data_seed() -> u64 {
    1234
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxClientConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticDataConfig),
    Idx { clients: Vec<IdxClientConfig> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Proportional to client training-set size.
    Samples,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: StrategyName,
    #[serde(default)]
    pub ablation: AblationFlags,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_lambda_u")]
    pub lambda_u: ScheduleConfig,
    #[serde(default = "default_lambda_d")]
    pub lambda_d: ScheduleConfig,
    #[serde(default = "default_un_weights")]
    pub un_branch_weights: [f64; 3],
    #[serde(default = "default_weight_mode")]
    pub aggregation: WeightMode,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_lambda_u() -> ScheduleConfig {
    ScheduleConfig {
        target: 1.0,
        ramp_steps: None,
    }
}

fn default_lambda_d() -> ScheduleConfig {
    ScheduleConfig {
        target: 0.1,
        ramp_steps: None,
    }
}

fn default_un_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_weight_mode() -> WeightMode {
    WeightMode::Samples
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_clients(&self) -> usize {
        match &self.data {
            DataConfig::Synthetic(s) => s.num_domains,
            DataConfig::Idx { clients } => clients.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must be non-empty".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.model.use_batchnorm && self.batch_size < 2 {
            return Err(ConfigError::Invalid(
                "batch_size must be >= 2 when batch normalization is enabled".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        for (name, s) in [("lambda_u", &self.lambda_u), ("lambda_d", &self.lambda_d)] {
            if !s.target.is_finite() || s.target < 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "{name}.target must be finite and >= 0"
                )));
            }
        }
        if self.un_branch_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(ConfigError::Invalid(
                "un_branch_weights must be finite and >= 0".into(),
            ));
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                if s.num_domains < 2 {
                    return Err(ConfigError::Invalid(
                        "synthetic data needs at least 2 domains".into(),
                    ));
                }
                if s.per_domain_train == 0 || s.per_domain_test == 0 {
                    return Err(ConfigError::Invalid(
                        "per-domain sample counts must be positive".into(),
                    ));
                }
                if let Some(specs) = &s.domain_specs {
                    if specs.len() != s.num_domains {
                        return Err(ConfigError::Invalid(format!(
                            "domain_specs has {} entries for {} domains",
                            specs.len(),
                            s.num_domains
                        )));
                    }
                    for spec in specs {
                        spec.validate()
                            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                    }
                }
                let expect = vec![1, s.image_size, s.image_size];
                if self.model.input_shape != expect {
                    return Err(ConfigError::Invalid(format!(
                        "model input_shape {:?} does not match synthetic image shape {:?}",
                        self.model.input_shape, expect
                    )));
                }
            }
            DataConfig::Idx { clients } => {
                if clients.is_empty() {
                    return Err(ConfigError::Invalid("idx data needs clients".into()));
                }
            }
        }
        Ok(())
    }

    /// Resolve the balance-factor schedules given the per-client step budget.
    pub fn schedules(&self, steps_per_epoch: usize) -> Schedules {
        let total = (self.rounds * self.local_epochs * steps_per_epoch) as u64;
        Schedules {
            lambda_u: self.lambda_u.resolve(total),
            lambda_d: self.lambda_d.resolve(total),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderBlock;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            strategy: StrategyName::TrFedDis,
            ablation: AblationFlags::default(),
            model: ModelConfig {
                input_shape: vec![1, 8, 8],
                encoder: vec![EncoderBlock::Conv(4), EncoderBlock::Dense(16)],
                head_width: 16,
                num_classes: 3,
                use_batchnorm: true,
            },
            data: DataConfig::Synthetic(SyntheticDataConfig {
                seed: 7,
                num_domains: 2,
                per_domain_train: 60,
                per_domain_test: 30,
                image_size: 8,
                domain_specs: None,
            }),
            rounds: 2,
            local_epochs: 1,
            lr: 0.01,
            batch_size: 16,
            seeds: vec![0],
            lambda_u: default_lambda_u(),
            lambda_d: default_lambda_d(),
            un_branch_weights: default_un_weights(),
            aggregation: WeightMode::Samples,
            parallel: false,
            out_dir: None,
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = tiny_config();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut v: serde_json::Value =
            serde_json::to_value(tiny_config()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("bogus_key".into(), serde_json::json!(1));
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn validation_catches_shape_mismatch() {
        let mut cfg = tiny_config();
        cfg.model.input_shape = vec![1, 10, 10];
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn validation_catches_bn_batch_size() {
        let mut cfg = tiny_config();
        cfg.batch_size = 1;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn schedules_default_to_half_of_training() {
        let cfg = tiny_config();
        // 2 rounds x 1 epoch x 3 steps (60 train / 16 batch, drop last)
        let s = cfg.schedules(3);
        assert_eq!(s.lambda_u.ramp_steps, 3);
        assert_eq!(s.lambda_u.target, 1.0);
    }
}
