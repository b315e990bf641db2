//! Experiment configuration: strict JSON parsing with defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::synthgen::CorpusSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Seeds used by `ablate` when none are given on the command line.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidParameter(msg) => Error::Config(format!("{name}: {msg}")),
                other => other,
            })
        };
        section("corpus", self.corpus.validate())?;
        section("train", self.train.validate())?;
        section("eval", self.eval.validate())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn fingerprint(&self) -> Result<String> {
        crate::json::fingerprint(self)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_pretty_sig17(self)
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
