//! Run configuration: one JSON document holding data, model, training,
//! protocol and output settings, with dotted-path overrides.

use std::path::{Path, PathBuf};

use cmpt_core::data::{DatasetConfig, MissingProtocol};
use cmpt_core::encoder::{EncoderConfig, Modality};
use cmpt_core::eval::AblationAxis;
use cmpt_core::model::{ModelSpec, TrainingMode};
use cmpt_core::rng::derive_seed;
use cmpt_core::train::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: TrainingMode,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Cmpt,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub varying: Modality,
    pub x_values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            varying: Modality::M2,
            x_values: vec![100.0, 90.0, 70.0, 50.0, 30.0, 10.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Availability pattern imposed on the training split.
    pub train: MissingProtocol,
    /// Protocols `eval` reports when none are given on the command line.
    pub eval: Vec<MissingProtocol>,
    pub sweep: SweepConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train: MissingProtocol::Complete,
            eval: vec![
                MissingProtocol::Complete,
                MissingProtocol::InferenceOnly { missing: Modality::M1 },
                MissingProtocol::InferenceOnly { missing: Modality::M2 },
            ],
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub protocols: ProtocolConfig,
    pub ablation: AblationAxis,
    /// Root directory for every artifact a command writes or reads.
    pub out_dir: PathBuf,
    /// Dump last-layer attention rows of the first test samples on `eval`.
    pub dump_attention: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            protocols: ProtocolConfig::default(),
            ablation: AblationAxis::Mode(TrainingMode::ALL.to_vec()),
            out_dir: PathBuf::from("runs/default"),
            dump_attention: false,
        }
    }
}

/// Seeds of every random stream of a run, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub pretrain: u64,
    pub model: u64,
    pub train: u64,
    pub train_protocol: u64,
    pub eval: u64,
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        let s = |tag: &str| derive_seed(self.seed, tag, &[]);
        Seeds {
            data: s("data"),
            pretrain: s("pretrain"),
            model: s("model"),
            train: s("train"),
            train_protocol: s("train_protocol"),
            eval: s("eval"),
        }
    }

    /// Copies the derived seeds into the nested configs.
    pub fn resolve_seeds(&mut self) {
        let seeds = self.seeds();
        self.data.seed = seeds.data;
        self.pretrain.seed = seeds.pretrain;
        self.train.seed = seeds.train;
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            mode: self.model.mode,
            encoder: self.model.encoder.clone(),
            inputs: [
                self.data.input_shape(Modality::M1),
                self.data.input_shape(Modality::M2),
            ],
            n_classes: self.data.n_classes,
            label_mode: self.data.label_mode,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg = |e: cmpt_core::Error| CliError::Config(e.to_string());
        self.data.validate().map_err(cfg)?;
        self.model_spec().validate().map_err(cfg)?;
        self.pretrain.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.protocols.train.validate().map_err(cfg)?;
        for p in &self.protocols.eval {
            p.validate().map_err(cfg)?;
        }
        cmpt_core::eval::sweep_points(&self.protocols.sweep.x_values).map_err(cfg)?;
        if self.ablation.is_empty() {
            return Err(CliError::Config("ablation axis has no values".into()));
        }
        Ok(())
    }

    /// Reads a JSON config, applies `key.path=value` overrides and the seed
    /// and output overrides, then validates the result.
    pub fn load(path: &Path, sets: &[String], seed: Option<u64>, out: Option<PathBuf>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for s in sets {
            apply_override(&mut value, s)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.out_dir = out;
        }
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets the leaf at a dotted path. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' must look like key.path=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override path '{path}'")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override '{path}' descends into a non-object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override '{path}' descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_leaves() {
        let mut v = serde_json::json!({"train": {"lambda": 0.2}});
        apply_override(&mut v, "train.lambda=0.0").unwrap();
        apply_override(&mut v, "model.mode=baseline").unwrap();
        assert_eq!(v["train"]["lambda"], 0.0);
        assert_eq!(v["model"]["mode"], "baseline");
        assert!(apply_override(&mut v, "nope").is_err());
        assert!(apply_override(&mut v, "train..x=1").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let v = serde_json::json!({"train": {"lamda": 0.2}});
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }
}
