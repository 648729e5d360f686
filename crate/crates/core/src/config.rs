//! Run configuration: one JSON document with every field defaulted, so a
//! run directory's `config.json` reproduces the run on its own.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::MatchConfig;
use crate::psm::PsmConfig;
use crate::simworld::GeneratorConfig;
use crate::ssl::{BurnInConfig, Settings, SslConfig};
use crate::tinynn::AdamConfig;

pub const DEFAULT_SEED: u64 = 7;

/// Scene counts per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    /// Labeled scenes kept out of training for evaluation.
    pub heldout: usize,
    /// Labeled scenes that measure the student's refinement quality.
    pub validation: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            labeled: 200,
            unlabeled: 19_800,
            heldout: 500,
            validation: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub psm: PsmConfig,
    pub optimizer: AdamConfig,
    pub burnin: BurnInConfig,
    pub ssl: SslConfig,
    pub matching: MatchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            run_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            psm: PsmConfig::default(),
            optimizer: AdamConfig::default(),
            burnin: BurnInConfig::default(),
            ssl: SslConfig::default(),
            matching: MatchConfig::default(),
        }
    }
}

impl RunConfig {
    /// A scaled-down run for smoke tests: fewer scenes and 10 SSL epochs.
    pub fn small() -> Self {
        let mut c = RunConfig {
            run_dir: PathBuf::from("runs/small"),
            data: DataConfig {
                labeled: 100,
                unlabeled: 2_000,
                heldout: 100,
                validation: 50,
            },
            ..RunConfig::default()
        };
        c.ssl.epochs = 10;
        c.ssl.unlabeled_per_epoch = 200;
        c
    }

    /// Parses a config document; errors carry the offending field path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// The fully materialized document, as written to `config.json`.
    pub fn to_json_pretty(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json("config", e))?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and re-serializes; a resolved document resolves to itself.
    pub fn resolve(text: &str) -> Result<String> {
        Self::from_json_str(text)?.to_json_pretty()
    }

    pub fn validate(&self) -> Result<()> {
        let nc = self.generator.num_classes();
        self.generator.validate()?;
        self.psm.validate()?;
        self.optimizer.validate("optimizer")?;
        self.ssl.student_optimizer.validate("ssl.student_optimizer")?;
        self.burnin.validate()?;
        self.ssl.validate(nc)?;
        self.matching.validate(nc)?;
        if self.psm.num_classes != nc {
            return Err(Error::Config {
                path: "psm.num_classes".into(),
                message: format!("generator defines {nc} classes, PSM has {}", self.psm.num_classes),
            });
        }
        if self.data.labeled == 0 {
            return Err(Error::Config {
                path: "data.labeled".into(),
                message: "need at least one labeled scene".into(),
            });
        }
        if self.data.validation == 0 {
            return Err(Error::Config {
                path: "data.validation".into(),
                message: "need at least one validation scene".into(),
            });
        }
        Ok(())
    }

    pub fn settings(&self) -> Settings {
        Settings {
            seed: self.seed,
            generator: self.generator.clone(),
            psm: self.psm.clone(),
            optimizer: self.optimizer,
            burnin: self.burnin.clone(),
            ssl: self.ssl.clone(),
            matching: self.matching.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolution_is_idempotent() {
        let once = RunConfig::resolve(r#"{"seed": 3, "ssl": {"epochs": 5}}"#).unwrap();
        assert_eq!(RunConfig::resolve(&once).unwrap(), once);
        let small = RunConfig::small().to_json_pretty().unwrap();
        assert_eq!(RunConfig::resolve(&small).unwrap(), small);
    }

    #[test]
    fn errors_name_the_field() {
        let path_of = |text: &str| match RunConfig::from_json_str(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(path_of(r#"{"ssl": {"epochs": "ten"}}"#), "ssl.epochs");
        assert_eq!(path_of(r#"{"generator": {"bogus": 1}}"#), "generator.bogus");
        assert_eq!(path_of(r#"{"matching": {"thresholds": [0.7, 1.5, 0.5]}}"#), "matching.thresholds[1]");
        assert_eq!(path_of(r#"{"optimizer": {"lr": -1}}"#), "optimizer.lr");
        assert_eq!(path_of(r#"{"psm": {"num_classes": 2}}"#), "psm.num_classes");
    }
}
