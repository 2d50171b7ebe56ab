//! Experiment configuration files (TOML, unknown keys rejected).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::ActivationKind;
use crate::arch_space::SpaceConfig;
use crate::error::{Error, Result};
use crate::evaluator::RECALIBRATION_STEPS;
use crate::proxies::{ProxyKind, ZenConfig};
use crate::supernet::SupernetConfig;
use crate::trainer::{SamplingStrategy, ScheduleKind, TrainConfig};

use super::dataset::{DataSource, DatasetSpec};

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "SUPERNET_LAB_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ActivationSweep,
    SamplerSweep,
    ScheduleSweep,
    PriorSweep,
    Consistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationPosition {
    #[default]
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Values of the swept knob; empty means the kind's default list.
    #[serde(default)]
    pub values: Vec<String>,
    /// Which activation an activation sweep replaces.
    #[serde(default)]
    pub position: ActivationPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Size of the ground-truthed subset of the space.
    #[serde(default = "EvaluationConfig::default_gt")]
    pub ground_truth_archs: usize,
    /// Seed choosing that subset; fixed across experiment seeds.
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default = "EvaluationConfig::default_epochs")]
    pub standalone_epochs: usize,
    #[serde(default = "EvaluationConfig::default_recal")]
    pub recalibration_steps: usize,
    #[serde(default = "EvaluationConfig::default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub zen: ZenConfig,
    #[serde(default)]
    pub zen_seed: u64,
    #[serde(default)]
    pub save_checkpoints: bool,
    #[serde(default = "EvaluationConfig::default_true")]
    pub write_train_logs: bool,
    #[serde(default = "EvaluationConfig::default_true")]
    pub plots: bool,
    /// Ground-truth cache shared between experiments; tables are keyed by
    /// content, so any experiment with the same data and optimizer reuses
    /// them. Relative paths resolve against the experiment directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_cache: Option<PathBuf>,
}

impl EvaluationConfig {
    fn default_gt() -> usize {
        64
    }
    fn default_epochs() -> usize {
        10
    }
    fn default_recal() -> usize {
        RECALIBRATION_STEPS
    }
    fn default_eval_batch() -> usize {
        200
    }
    fn default_true() -> bool {
        true
    }
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            ground_truth_archs: Self::default_gt(),
            subset_seed: 0,
            standalone_epochs: Self::default_epochs(),
            recalibration_steps: Self::default_recal(),
            eval_batch_size: Self::default_eval_batch(),
            zen: ZenConfig::default(),
            zen_seed: 0,
            save_checkpoints: false,
            write_train_logs: true,
            plots: true,
            ground_truth_cache: None,
        }
    }
}

fn default_supernet() -> SupernetConfig {
    SupernetConfig::new(SpaceConfig::toy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Relative paths resolve against `$SUPERNET_LAB_OUT` (default `.`).
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_supernet")]
    pub supernet: SupernetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

/// One point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepValue {
    Base,
    Activation(ActivationKind),
    Sampler(SamplingStrategy),
    Schedule(ScheduleKind),
    /// `None` disables the rank loss.
    Prior(Option<ProxyKind>),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Base => "base".into(),
            SweepValue::Activation(a) => snake_name(a),
            SweepValue::Sampler(s) => snake_name(s),
            SweepValue::Schedule(s) => snake_name(s),
            SweepValue::Prior(None) => "none".into(),
            SweepValue::Prior(Some(p)) => p.to_string(),
        }
    }
}

/// Serialized name of a unit enum variant.
pub(crate) fn snake_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn parse_named<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| Error::Config(format!("unknown {what} `{s}`")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.supernet.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        if self.dataset.num_classes != self.supernet.space.num_classes
            || self.dataset.resolution != self.supernet.space.input_resolution
            || self.dataset.channels != self.supernet.input_channels
        {
            return Err(Error::Config(
                "dataset classes, resolution and channels must match the supernet".into(),
            ));
        }
        let e = &self.evaluation;
        if e.ground_truth_archs < 3 || e.standalone_epochs == 0 || e.eval_batch_size == 0 {
            return Err(Error::Config(
                "ground_truth_archs >= 3, standalone_epochs > 0, eval_batch_size > 0 required".into(),
            ));
        }
        if e.recalibration_steps == 0 {
            return Err(Error::Config("recalibration_steps must be positive".into()));
        }
        let values = self.sweep_values()?;
        if self.train.m_pairs == 0 && values.iter().any(|v| matches!(v, SweepValue::Prior(Some(_)))) {
            return Err(Error::Config("a prior sweep with a prior needs train.m_pairs > 0".into()));
        }
        Ok(())
    }

    /// The sweep points, in run order.
    pub fn sweep_values(&self) -> Result<Vec<SweepValue>> {
        let vals = &self.sweep.values;
        let given = |default: &[&str]| -> Vec<String> {
            if vals.is_empty() {
                default.iter().map(|s| s.to_string()).collect()
            } else {
                vals.clone()
            }
        };
        match self.kind {
            ExperimentKind::Consistency => {
                if !vals.is_empty() {
                    return Err(Error::Config("a consistency run takes no sweep values".into()));
                }
                Ok(vec![SweepValue::Base])
            }
            ExperimentKind::ActivationSweep => given(&["relu", "selu", "prelu", "swish", "mish"])
                .iter()
                .map(|s| parse_named(s, "activation").map(SweepValue::Activation))
                .collect(),
            ExperimentKind::SamplerSweep => given(&["uniform", "sandwich", "balanced"])
                .iter()
                .map(|s| parse_named(s, "sampling strategy").map(SweepValue::Sampler))
                .collect(),
            ExperimentKind::ScheduleSweep => given(&["constant", "warmup", "cosine", "multistage"])
                .iter()
                .map(|s| parse_named(s, "schedule").map(SweepValue::Schedule))
                .collect(),
            ExperimentKind::PriorSweep => given(&["none", "flops", "zen_score"])
                .iter()
                .map(|s| {
                    if s.eq_ignore_ascii_case("none") {
                        Ok(SweepValue::Prior(None))
                    } else {
                        s.parse::<ProxyKind>().map(|p| SweepValue::Prior(Some(p)))
                    }
                })
                .collect(),
        }
    }

    /// Supernet and training configuration of one cell.
    pub fn cell_configs(&self, value: SweepValue, seed: u64) -> (SupernetConfig, TrainConfig) {
        let mut net = self.supernet.clone();
        let mut train = self.train.clone();
        train.seed = seed;
        match value {
            SweepValue::Base => {}
            SweepValue::Activation(a) => match self.sweep.position {
                ActivationPosition::Internal => net.internal_activation = a,
                ActivationPosition::External => net.external_activation = a,
            },
            SweepValue::Sampler(s) => train.sampling = s,
            SweepValue::Schedule(k) => train.schedule.kind = k,
            SweepValue::Prior(None) => train.m_pairs = 0,
            SweepValue::Prior(Some(p)) => train.prior = p,
        }
        (net, train)
    }

    /// Where results go: `output_dir` itself if absolute, else under `root`.
    pub fn resolve_output(&self, root: &Path) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            root.join(&self.output_dir)
        }
    }

    /// The desk-scale profile: toy space, synthetic 8x8 data, short runs.
    pub fn toy(kind: ExperimentKind, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            kind,
            output_dir: PathBuf::from(snake_name(&kind)),
            seeds,
            supernet: default_supernet(),
            train: toy_train_config(),
            dataset: DatasetSpec {
                source: DataSource::synthetic(),
                ..DatasetSpec::toy(0)
            },
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Optimizer settings used at desk scale. Training starts from random
/// weights, so the learning rate is far above the fine-tuning default.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        total_epochs: 30,
        batch_size: 64,
        lr: 0.1,
        schedule: crate::trainer::ScheduleSpec {
            warmup_epochs: 10,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

/// `$SUPERNET_LAB_OUT`, or the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = ExperimentConfig::toy(ExperimentKind::SamplerSweep, vec![0, 1, 2]);
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = ExperimentConfig::toy(ExperimentKind::Consistency, vec![0]);
        let text = cfg.to_toml().unwrap().replace("seeds =", "seedz = [1]\nseeds =");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn empty_seeds_rejected() {
        let mut cfg = ExperimentConfig::toy(ExperimentKind::Consistency, vec![0]);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_values_parse() {
        let mut cfg = ExperimentConfig::toy(ExperimentKind::PriorSweep, vec![0]);
        assert_eq!(
            cfg.sweep_values().unwrap(),
            vec![
                SweepValue::Prior(None),
                SweepValue::Prior(Some(ProxyKind::Flops)),
                SweepValue::Prior(Some(ProxyKind::ZenScore))
            ]
        );
        cfg.kind = ExperimentKind::SamplerSweep;
        cfg.sweep.values = vec!["balanced".into(), "fair".into()];
        assert!(cfg.sweep_values().is_err());
        assert_eq!(SweepValue::Sampler(SamplingStrategy::Balanced).label(), "balanced");
        assert_eq!(SweepValue::Prior(Some(ProxyKind::ZenScore)).label(), "zen_score");
    }
}
