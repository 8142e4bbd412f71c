//! Flat dotted-key JSON configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub type Flat = BTreeMap<String, Value>;

/// Flatten nested objects into dotted keys.
pub fn flatten(value: &Value) -> Flat {
    fn walk(prefix: &str, v: &Value, out: &mut Flat) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = Flat::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &Flat) -> Result<Value, CliError> {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(CliError::Usage(format!("malformed config key {key:?}")));
            }
            if i + 1 == parts.len() {
                if node.contains_key(*part) {
                    return Err(CliError::Usage(format!("config key {key:?} collides with a section")));
                }
                node.insert(part.to_string(), v.clone());
            } else {
                let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
                node = entry
                    .as_object_mut()
                    .ok_or_else(|| CliError::Usage(format!("config key {key:?} nests under a value")))?;
            }
        }
    }
    Ok(Value::Object(root))
}

/// Settings gathered from a config file and `--set` overrides, before
/// defaults are applied.
#[derive(Debug, Default)]
pub struct Overrides {
    values: Flat,
}

impl Overrides {
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut values = Flat::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let parsed: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let Value::Object(map) = parsed else {
                return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
            };
            for (k, v) in map {
                if v.is_object() {
                    return Err(CliError::Usage(format!(
                        "{}: key {k:?} holds an object; use dotted keys",
                        path.display()
                    )));
                }
                values.insert(k, v);
            }
        }
        for s in sets {
            let (k, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            values.insert(k.trim().to_string(), v);
        }
        Ok(Self { values })
    }

    pub fn insert(&mut self, key: &str, v: Value) {
        self.values.insert(key.to_string(), v);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Apply the overrides to `defaults` and deserialize. Returns the
    /// typed value and its fully resolved flat form.
    pub fn resolve<C: Serialize + DeserializeOwned>(&self, defaults: &C) -> Result<(C, Flat), CliError> {
        let base = serde_json::to_value(defaults).expect("config serializes");
        let mut flat = flatten(&base);
        for (k, v) in &self.values {
            if !flat.contains_key(k) {
                return Err(CliError::Usage(format!("unknown config key {k:?}")));
            }
            flat.insert(k.clone(), v.clone());
        }
        let typed: C = serde_json::from_value(unflatten(&flat)?).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        // re-serialize so the echo carries normalized values
        let resolved = flatten(&serde_json::to_value(&typed).expect("config serializes"));
        Ok((typed, resolved))
    }
}

pub fn to_json(flat: &Flat) -> String {
    let map: Map<String, Value> = flat.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes");
    s.push('\n');
    s
}
