//! Run configuration: one TOML file with dotted keys, plus `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::decode::{DecodeConfig, Directions};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::MatchStandard;
use crate::model::ModelSwitches;
use crate::tokenize::TokenizerKind;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw dataset files by split name (`train`, `valid`, `test`, ...).
    pub raw: BTreeMap<String, PathBuf>,
    /// Directory holding prepared `<split>.corpus.json` files.
    pub prepared: PathBuf,
    pub standard: MatchStandard,
    pub tokenizer: TokenizerKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            raw: BTreeMap::new(),
            prepared: PathBuf::from("prepared"),
            standard: MatchStandard::Exact,
            tokenizer: TokenizerKind::Basic,
        }
    }
}

impl DataConfig {
    pub fn prepared_split(&self, split: &str) -> PathBuf {
        self.prepared.join(format!("{split}.corpus.json"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationPredictionConfig {
    pub enabled: bool,
}

impl Default for RelationPredictionConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub decode: DecodeConfig,
    pub direction: Directions,
    pub relation_prediction: RelationPredictionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
            decode: DecodeConfig::default(),
            direction: Directions::default(),
            relation_prediction: RelationPredictionConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` assignment to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key in override `{assignment}`")));
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.contrastive.validate()?;
        self.decode.validate()?;
        self.switches().validate()
    }

    pub fn switches(&self) -> ModelSwitches {
        ModelSwitches {
            directions: self.direction,
            relation_prediction: self.relation_prediction.enabled,
            teacher_forcing: self.train.teacher_forcing,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}
