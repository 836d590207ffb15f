//! `--config FILE` handling: file values first, explicit flags on top.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

/// Read a JSON object from `path`.
pub fn read_object(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(UsageError(format!("config {} is not a JSON object", path.display())).into()),
        Err(e) => Err(UsageError(format!("config {}: {e}", path.display())).into()),
    }
}

/// Merge the flags that were given (non-null, non-empty, non-false) over
/// the config file's object.
pub fn merged<A: Serialize>(args: &A, file: Option<&Path>) -> anyhow::Result<Map<String, Value>> {
    let mut base = match file {
        Some(p) => read_object(p)?,
        None => Map::new(),
    };
    if let Value::Object(flags) = serde_json::to_value(args)? {
        for (k, v) in flags {
            let unset = match &v {
                Value::Null | Value::Bool(false) => true,
                Value::Array(a) => a.is_empty(),
                _ => false,
            };
            if !unset {
                base.insert(k, v);
            }
        }
    }
    Ok(base)
}

pub fn decode<T: DeserializeOwned>(map: &Map<String, Value>, what: &str) -> anyhow::Result<T> {
    serde_json::from_value(Value::Object(map.clone())).map_err(|e| UsageError(format!("{what}: {e}")).into())
}

/// Clap value parser for enums that use serde's snake_case names.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}
