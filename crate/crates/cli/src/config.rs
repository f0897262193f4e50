//! Layered training configuration: defaults, then a TOML file, then `--set` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use i2v_core::networks::ModelConfig;
use i2v_core::trainer::TrainConfig;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size networks at 256x256.
    Full,
    /// A few thousand parameters at 32x32, trains on a laptop CPU.
    Tiny,
}

pub fn preset(p: Preset) -> TrainConfig {
    match p {
        Preset::Full => TrainConfig::default(),
        Preset::Tiny => {
            let mut cfg = TrainConfig {
                model: ModelConfig::tiny(32),
                total_iterations: 500,
                checkpoint_interval: 100,
                learning_rate: 2e-3,
                ..TrainConfig::default()
            };
            cfg.weights.patches = 16;
            cfg
        }
    }
}

/// Applies `src` on top of `dst`. Every key in `src` must already exist in
/// `dst` and keep its JSON type; `null` slots accept any value.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match src {
        Value::Object(entries) => {
            let Value::Object(target) = dst else {
                bail!("configuration key `{path}` is not a table");
            };
            for (k, v) in entries {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = target
                    .get_mut(&k)
                    .ok_or_else(|| anyhow!("unknown configuration key `{key}`"))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        value => {
            let compatible = match (&*dst, &value) {
                (Value::Null, _) => true,
                (Value::Number(a), Value::Number(b)) => a.is_f64() || b.is_u64(),
                (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
                (Value::Array(_), Value::Array(_)) => true,
                _ => false,
            };
            if !compatible {
                bail!("configuration key `{path}` expects a value like {dst}, got {value}");
            }
            *dst = value;
            Ok(())
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{raw}` is not of the form key=value"))?;
    let key = key.trim();
    let value = value.trim();
    let parsed = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key"))?,
        Err(_) => Value::String(value.to_string()),
    };
    Ok((key.to_string(), parsed))
}

fn nest(key: &str, value: Value) -> Value {
    key.rsplit('.').fold(value, |acc, part| {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), acc);
        Value::Object(m)
    })
}

/// Resolves the final configuration from a preset, an optional file and overrides.
pub fn resolve(base: TrainConfig, file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, serde_json::to_value(table)?, "")?;
    }
    for raw in overrides {
        let (key, v) = parse_override(raw)?;
        merge(&mut value, nest(&key, v), "")?;
    }
    let cfg: TrainConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &TrainConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}
