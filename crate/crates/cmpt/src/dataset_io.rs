//! Dataset files: `manifest.json` plus one little-endian `f64` block per
//! split. Each record is `[m1_present, m2_present, label…, raw_m1…, raw_m2…]`
//! where the label is one class index (single-label) or one 0/1 value per
//! class (multi-label).

use std::fs;
use std::path::Path;

use cmpt_core::data::{Dataset, DatasetConfig, Sample, SplitStats};
use cmpt_core::fusion::PresenceMask;
use cmpt_core::objectives::{LabelMode, LabelTarget};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "cmpt-data/1";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub n_samples: usize,
    pub stats: SplitStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format: String,
    pub config: DatasetConfig,
    pub seed: u64,
    /// `f64` values per record.
    pub record_len: usize,
    pub splits: Vec<SplitInfo>,
}

fn label_width(cfg: &DatasetConfig) -> usize {
    match cfg.label_mode {
        LabelMode::Single => 1,
        LabelMode::Multi => cfg.n_classes,
    }
}

fn record_len(cfg: &DatasetConfig) -> usize {
    2 + label_width(cfg) + cfg.raw_dim_m1 + cfg.raw_dim_m2
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn encode_split(split: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for s in split {
        push(flag(s.mask.m1_present));
        push(flag(s.mask.m2_present));
        match &s.target {
            LabelTarget::Single(c) => push(*c as f64),
            LabelTarget::Multi(bits) => bits.iter().for_each(|&b| push(flag(b))),
        }
        s.raw_m1.iter().chain(&s.raw_m2).for_each(|&v| push(v));
    }
    out
}

fn bad(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {what}", path.display()))
}

fn decode_flag(path: &Path, v: f64) -> CliResult<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(bad(path, format!("expected 0 or 1, found {v}")))
    }
}

fn decode_split(path: &Path, bytes: &[u8], cfg: &DatasetConfig, n: usize) -> CliResult<Vec<Sample>> {
    let rec = record_len(cfg);
    if bytes.len() != n * rec * 8 {
        return Err(bad(path, format!("expected {} bytes, found {}", n * rec * 8, bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let lw = label_width(cfg);
    values
        .chunks_exact(rec)
        .map(|r| {
            let mask = PresenceMask::new(decode_flag(path, r[0])?, decode_flag(path, r[1])?);
            let labels = &r[2..2 + lw];
            let target = match cfg.label_mode {
                LabelMode::Single => {
                    let c = labels[0];
                    if c < 0.0 || c.fract() != 0.0 || c as usize >= cfg.n_classes {
                        return Err(bad(path, format!("invalid class index {c}")));
                    }
                    LabelTarget::Single(c as usize)
                }
                LabelMode::Multi => {
                    LabelTarget::Multi(labels.iter().map(|&v| decode_flag(path, v)).collect::<CliResult<_>>()?)
                }
            };
            let raw = &r[2 + lw..];
            Ok(Sample {
                raw_m1: raw[..cfg.raw_dim_m1].to_vec(),
                raw_m2: raw[cfg.raw_dim_m1..].to_vec(),
                mask,
                target,
            })
        })
        .collect()
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let splits = [&data.train, &data.val, &data.test];
    let mut infos = Vec::new();
    for (name, split) in SPLITS.iter().zip(splits) {
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, encode_split(split)).map_err(|e| CliError::io(&path, e))?;
        infos.push(SplitInfo {
            name: name.to_string(),
            file,
            n_samples: split.len(),
            stats: SplitStats::of(split),
        });
    }
    let manifest = DataManifest {
        format: FORMAT.into(),
        config: data.config.clone(),
        seed: data.config.seed,
        record_len: record_len(&data.config),
        splits: infos,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Data(format!("missing dataset manifest {} (run gen-data first)", path.display()))
        } else {
            CliError::io(&path, e)
        }
    })?;
    let manifest: DataManifest = serde_json::from_str(&text).map_err(|e| bad(&path, e))?;
    if manifest.format != FORMAT {
        return Err(bad(&path, format!("unsupported dataset version '{}'", manifest.format)));
    }
    let mut config = manifest.config.clone();
    config.seed = manifest.seed;
    if manifest.record_len != record_len(&config) {
        return Err(bad(&path, "record length does not match the config"));
    }
    let mut splits = Vec::new();
    for name in SPLITS {
        let info = manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| bad(&path, format!("split '{name}' missing")))?;
        let p = dir.join(&info.file);
        let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        let split = decode_split(&p, &bytes, &config, info.n_samples)?;
        if SplitStats::of(&split) != info.stats {
            return Err(bad(&p, "split statistics disagree with the manifest"));
        }
        splits.push(split);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        config,
        train,
        val,
        test,
    })
}
