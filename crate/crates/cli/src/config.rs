//! Run configuration resolved as flag > file > default.

use std::path::Path;

use adrgnn::adr::Terms;
use adrgnn::train::{ModelKind, TrainConfig};
use clap::Args;
use serde_json::{json, Map, Value};

use crate::error::{CliError, CliResult};

/// Flags that override single keys of the training configuration.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Learning rate for every parameter group.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay for every parameter group.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Layer step size h.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub batch_norm: Option<bool>,
    /// adr or gcn.
    #[arg(long)]
    pub model: Option<String>,
    /// Subset of A, D, R, e.g. "AD".
    #[arg(long)]
    pub terms: Option<String>,
}

impl ConfigFlags {
    fn to_value(&self, seed: Option<u64>) -> CliResult<Value> {
        let mut m = Map::new();
        let mut set = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(v) = self.epochs {
            set("epochs", json!(v));
        }
        if let Some(v) = self.patience {
            set("patience", json!(v));
        }
        if let Some(v) = self.layers {
            set("layers", json!(v));
        }
        if let Some(v) = self.hidden {
            set("hidden", json!(v));
        }
        if let Some(v) = self.dropout {
            set("dropout", json!(v));
            set("hidden_dropout", json!(v));
        }
        if let Some(v) = self.step {
            set("h", json!(v));
        }
        if let Some(v) = self.batch_norm {
            set("batch_norm", json!(v));
        }
        if let Some(v) = &self.model {
            let kind: ModelKind = serde_json::from_value(json!(v.to_lowercase()))
                .map_err(|_| CliError::usage(format!("unknown model {v:?} (expected adr or gcn)")))?;
            set("model", serde_json::to_value(kind)?);
        }
        if let Some(v) = &self.terms {
            let t = Terms::parse(v).map_err(|e| CliError::usage(format!("--terms: {e}")))?;
            set("terms", json!(t.label()));
        }
        if let Some(v) = seed {
            set("seed", json!(v));
        }
        if self.lr.is_some() || self.weight_decay.is_some() {
            let mut group = Map::new();
            if let Some(v) = self.lr {
                group.insert("lr".into(), json!(v));
            }
            if let Some(v) = self.weight_decay {
                group.insert("weight_decay".into(), json!(v));
            }
            let groups: Map<String, Value> = ["embedding", "advection", "diffusion", "reaction"]
                .iter()
                .map(|g| (g.to_string(), Value::Object(group.clone())))
                .collect();
            set("groups", Value::Object(groups));
        }
        Ok(Value::Object(m))
    }
}

/// Objects merge key by key; anything else in `top` replaces `base`.
pub fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: invalid JSON: {e}", path.display())))
}

/// Layers the config file and the flags over `base` and checks the result.
pub fn resolve(base: &TrainConfig, file: Option<&Path>, flags: &ConfigFlags, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut v = serde_json::to_value(base)?;
    if let Some(path) = file {
        let f = read_json(path)?;
        if !f.is_object() {
            return Err(CliError::usage(format!("{}: config must be a JSON object", path.display())));
        }
        overlay(&mut v, f);
    }
    overlay(&mut v, flags.to_value(seed)?);
    let origin = file.map(|p| p.display().to_string()).unwrap_or_else(|| "flags".into());
    let cfg: TrainConfig =
        serde_json::from_value(v).map_err(|e| CliError::usage(format!("{origin}: invalid config: {e}")))?;
    cfg.validate().map_err(|e| CliError::usage(format!("{origin}: {e}")))?;
    for w in cfg.range_warnings() {
        log::warn!("{w}");
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 7, "layers": 3, "groups": {"reaction": {"lr": 0.02}}}"#).unwrap();
        let flags = ConfigFlags { layers: Some(5), ..ConfigFlags::default() };
        let cfg = resolve(&TrainConfig::default(), Some(&path), &flags, Some(9)).unwrap();
        assert_eq!((cfg.epochs, cfg.layers, cfg.seed), (7, 5, 9));
        assert_eq!(cfg.groups.reaction.lr, 0.02);
        assert_eq!(cfg.groups.reaction.weight_decay, TrainConfig::default().groups.reaction.weight_decay);
        assert_eq!(cfg.hidden, TrainConfig::default().hidden);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epoch": 7}"#).unwrap();
        let err = resolve(&TrainConfig::default(), Some(&path), &ConfigFlags::default(), None).unwrap_err();
        assert_eq!(err.code, crate::error::USAGE);
    }
}
