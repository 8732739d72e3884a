//! Shared fixtures for the integration tests of the `cmpt` crate.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

/// A run small enough to train in well under a second.
pub fn small_config_value(out_dir: &Path) -> Value {
    json!({
        "seed": 3,
        "data": {
            "n_classes": 4,
            "train_size": 48,
            "val_size": 8,
            "test_size": 24,
            "latent_dim": 4,
            "raw_dim_m1": 16,
            "raw_dim_m2": 12,
            "patch_m1": 4,
            "patch_m2": 4,
            "exclusive_m1": [2],
            "exclusive_m2": [3]
        },
        "model": {
            "encoder": { "d_model": 8, "heads": 2, "layers": 1, "ff_dim": 16 }
        },
        "pretrain": { "epochs": 2, "warmup_epochs": 1, "batch_size": 8 },
        "train": { "epochs": 2, "warmup_epochs": 1, "batch_size": 8 },
        "protocols": { "sweep": { "varying": "m2", "x_values": [100, 50, 0] } },
        "ablation": { "axis": "lambda", "values": [0.0, 0.2] },
        "out_dir": out_dir
    })
}

/// Writes the small config into `dir` and returns its path.
pub fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let value = small_config_value(&dir.join("run"));
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

/// The shipped reference configuration.
pub fn default_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join("default.json")
}
