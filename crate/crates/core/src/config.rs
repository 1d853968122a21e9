//! Run configuration. Every field has a default and unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context_net::ModelArch;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::training::{RmsPropConfig, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory read by every verb except `generate`, which writes it.
    pub root: PathBuf,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synthetic"),
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Patches kept per class; `None` keeps all.
    pub per_class_cap: Option<usize>,
    pub optimizer: RmsPropConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            per_class_cap: Some(400),
            optimizer: RmsPropConfig {
                lr: 1e-3,
                ..RmsPropConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub finetune_extractor: bool,
    /// Extractor checkpoint from `pretrain`, copied in before training.
    pub pretrained: Option<PathBuf>,
    /// Cross-validation folds over train+val; 0 trains once on the splits.
    pub folds: usize,
    pub optimizer: RmsPropConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            finetune_extractor: true,
            pretrained: None,
            folds: 0,
            optimizer: RmsPropConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub window_cells: usize,
    pub stride_cells: usize,
    /// Manifest split to grade.
    pub split: String,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            window_cells: 8,
            stride_cells: 1,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// History or fold-table CSVs to compare.
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub data: DataConfig,
    pub model: ModelArch,
    pub strategy: Strategy,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs"),
            workers: 1,
            data: DataConfig::default(),
            model: ModelArch::default(),
            strategy: Strategy::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }
}

/// Key named by an "unknown field" configuration error, if that is what it is.
pub fn unknown_key(err: &Error) -> Option<String> {
    let Error::Config(msg) = err else { return None };
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_owned())
}
