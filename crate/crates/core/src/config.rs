//! Run configuration: TOML sections for every module plus global settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::augment::AugmentConfig;
use crate::data::Grouping;
use crate::encoder::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::finetune::FinetuneConfig;
use crate::moco::PretrainConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::SynthSpec;

/// Dataset partitioning for the evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub grouping: Grouping,
    pub folds: usize,
    /// Glob for NIfTI files when a data directory has no manifest.
    pub data_pattern: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { split: (0.70, 0.15, 0.15), grouping: Grouping::Record, folds: 3, data_pattern: "*.nii*".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for loading and augmentation; 0 picks the core count.
    pub workers: usize,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub synth: SynthSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("run"),
            workers: 0,
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.synth.validate()?;
        if self.eval.folds < 2 {
            return Err(Error::Config("eval.folds must be at least 2".into()));
        }
        Ok(())
    }

    /// Canonical TOML text; loading it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn default_table() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

/// Rejects keys that do not exist in the default configuration.
fn check_keys(raw: &Table) -> Result<()> {
    let defaults = default_table();
    for (key, value) in raw {
        match defaults.get(key) {
            None => return Err(Error::Config(format!("unknown key `{key}` at top level"))),
            Some(Value::Table(section)) => {
                let Value::Table(given) = value else {
                    return Err(Error::Config(format!("`{key}` must be a [{key}] section")));
                };
                if let Some(bad) = given.keys().find(|k| !section.contains_key(*k)) {
                    return Err(Error::Config(format!("unknown key `{bad}` in section [{key}]")));
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Applies `section.key=value` (or top-level `key=value`) overrides.
pub fn apply_overrides(raw: &mut Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let value = parse_value(value.trim());
        let path = path.trim();
        match path.split_once('.') {
            Some((section, key)) => {
                let entry = raw.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
                let Value::Table(t) = entry else {
                    return Err(Error::Config(format!("`{section}` is not a section")));
                };
                t.insert(key.to_string(), value);
            }
            None => {
                raw.insert(path.to_string(), value);
            }
        }
    }
    Ok(())
}

/// Parses config text, applies overrides, and fills the rest with defaults.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut raw: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    apply_overrides(&mut raw, overrides)?;
    check_keys(&raw)?;
    let cfg: RunConfig = Value::Table(raw)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    load_config_with(Some(path), &[])
}

/// Config from an optional file plus command-line overrides.
pub fn load_config_with(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).at(p)?,
        None => String::new(),
    };
    parse_config(&text, overrides).map_err(|e| match (e, path) {
        (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })
}
