//! Flat `key = value` configuration applied onto model and training configs.
//!
//! Keys are field names of the model or training configuration. Nested
//! fields use dots, e.g. `initial_weights.dd = 0.5` or
//! `velocity_range.hi = 63`. `seed` sets both seeds.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pianoform_core::model::ModelConfig;
use pianoform_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub entries: Vec<(String, Value)>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) -> Result<()> {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match value {
            toml::Value::Table(inner) => flatten(&path, inner, out)?,
            other => out.push((path, serde_json::to_value(other)?)),
        }
    }
    Ok(())
}

impl Overrides {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries)?;
        Ok(Overrides { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Parses `key=value`. The value is read as a TOML literal, falling back
    /// to a bare string (`activation=gelu`).
    pub fn push_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got {assignment:?}"))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key.is_empty() {
            bail!("empty key in {assignment:?}");
        }
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key"))?,
            Err(_) => Value::String(raw.to_string()),
        };
        self.entries.push((key.to_string(), value));
        Ok(())
    }

    pub fn push(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.entries.push((key.to_string(), serde_json::to_value(value)?));
        Ok(())
    }

    pub fn touches(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key || k.starts_with(&format!("{key}.")))
    }

    /// Applies every entry in order; later entries win. Unknown keys and
    /// ill-typed values are errors.
    pub fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
        let mut m = serde_json::to_value(&*model)?;
        let mut t = serde_json::to_value(&*train)?;
        for (key, value) in &self.entries {
            let hit_model = set_path(&mut m, key, value);
            let hit_train = set_path(&mut t, key, value);
            if !hit_model && !hit_train {
                bail!("unknown configuration key {key:?}; known keys: {}", known_keys(model, train).join(", "));
            }
        }
        *model = decode(m, "model")?;
        *train = decode(t, "training")?;
        model.validate()?;
        train.validate()?;
        Ok(())
    }
}

fn decode<T: DeserializeOwned>(value: Value, what: &str) -> Result<T> {
    serde_json::from_value(value).with_context(|| format!("invalid {what} configuration value"))
}

fn set_path(root: &mut Value, key: &str, value: &Value) -> bool {
    let mut node = root;
    for part in key.split('.') {
        match node.get_mut(part) {
            Some(next) => node = next,
            None => return false,
        }
    }
    if node.is_object() {
        return false;
    }
    *node = value.clone();
    true
}

fn leaf_keys(prefix: &str, value: &Value, out: &mut Vec<String>) {
    if let Value::Object(map) = value {
        for (k, v) in map {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            leaf_keys(&path, v, out);
        }
    } else {
        out.push(prefix.to_string());
    }
}

pub fn known_keys(model: &ModelConfig, train: &TrainConfig) -> Vec<String> {
    let mut keys = Vec::new();
    leaf_keys("", &serde_json::to_value(model).expect("config serializes"), &mut keys);
    leaf_keys("", &serde_json::to_value(train).expect("config serializes"), &mut keys);
    keys.sort();
    keys.dedup();
    keys
}
