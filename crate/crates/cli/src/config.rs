use std::path::{Path, PathBuf};

use phiml_core::datagen::{GenerationConfig, Mode, Variant};
use phiml_core::eval::RolloutMode;
use phiml_core::hash::config_hash;
use phiml_core::training::TrainConfig;
use phiml_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Naive,
    Phiml,
    /// The simulator itself; nothing to train.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_dir: "out/data".into(),
            checkpoint: "out/checkpoint.json".into(),
            report_dir: "out/report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Parameter sampling and splits.
    pub data: u64,
    /// Network initialization and minibatch order.
    pub model: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, model: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub modes: Vec<RolloutMode>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            modes: RolloutMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub seeds: Vec<u64>,
    pub inject_mutant: bool,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            inject_mutant: false,
        }
    }
}

/// One JSON document describing a whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub model: ModelKind,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub paths: Paths,
    /// Defaults to the standard generation settings of `mode`.
    pub generation: GenerationConfig,
    /// `seed` is overwritten by `seeds.model`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub gradcheck: GradcheckSettings,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Parses `key.sub=value`; the value is JSON when it parses, a string
/// otherwise.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{text}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_error(format!("override `{text}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.split('.').map(str::to_owned).collect(), value))
}

fn apply_override(doc: &mut Value, key: &[String], value: Value) -> Result<()> {
    let mut node = doc;
    for (i, part) in key.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(format!("cannot set `{}` inside a non-object", key[..i].join("."))))?;
        if i + 1 == key.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        node = obj.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys are non-empty")
}

impl ExperimentConfig {
    /// Reads the optional config file, fills mode-dependent defaults and
    /// applies the overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(config_error("config must be a JSON object"));
        }
        let parsed = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>>>()?;

        // mode and seeds decide the generation defaults, so settle them first
        let mut probe = doc.clone();
        for (key, value) in &parsed {
            apply_override(&mut probe, key, value.clone())?;
        }
        let mode: Mode = serde_json::from_value(probe.get("mode").cloned().unwrap_or(Value::Null))
            .map_err(|e| config_error(format!("mode: {e}")))?;
        let seeds: Seeds = serde_json::from_value(probe.get("seeds").cloned().unwrap_or(Value::Object(Default::default())))
            .map_err(|e| config_error(format!("seeds: {e}")))?;
        let obj = doc.as_object_mut().expect("checked above");
        if !obj.contains_key("generation") {
            obj.insert("generation".into(), serde_json::to_value(GenerationConfig::standard(mode, seeds.data))?);
        }

        for (key, value) in parsed {
            apply_override(&mut doc, &key, value)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| config_error(format!("config: {e}")))?;
        cfg.generation.seed = cfg.seeds.data;
        cfg.train.seed = cfg.seeds.model;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.space.validate()?;
        if self.generation.mode() != self.mode {
            return Err(config_error("generation parameter space does not match `mode`"));
        }
        if self.generation.n_steps < 2 {
            return Err(config_error("generation.n_steps must be at least 2"));
        }
        self.train.validate()?;
        if self.eval.modes.is_empty() {
            return Err(config_error("eval.modes must not be empty"));
        }
        Ok(())
    }

    /// Hash of everything that influences results; file locations are
    /// excluded so the same experiment hashes identically anywhere.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.paths = Paths::default();
        config_hash(&copy)
    }
}
