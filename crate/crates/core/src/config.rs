//! Run configuration files (JSON).
//!
//! Every section is optional and falls back to its defaults; unknown keys
//! are rejected. Manifest paths are resolved against the config file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::Manifest;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::mixer::SamplerConfig;
use crate::model::ModelConfig;
use crate::postproc::RemixConfig;
use crate::trainer::{TrainConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub remix: RemixConfig,
    pub stft: StftConfig,
    /// JSONL manifests merged into one training corpus.
    pub manifests: Vec<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in &mut cfg.manifests {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        self.remix.validate()
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            sampler: self.sampler.clone(),
            train: self.train.clone(),
            stft: self.stft,
        }
    }

    /// Reads and merges all listed manifests.
    pub fn load_manifests(&self) -> Result<Manifest> {
        if self.manifests.is_empty() {
            return Err(Error::InvalidConfig("no manifests listed".into()));
        }
        let all = self
            .manifests
            .iter()
            .map(Manifest::read_jsonl)
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest::merge(all))
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
