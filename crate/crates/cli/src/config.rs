//! JSON config documents layered over defaults, plus `key.path=value`
//! overrides.

use serde::{de::DeserializeOwned, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Merges `patch` into `base`. Keys must already exist in `base`; objects
/// whose `kind` tag changes are replaced wholesale.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let kind_changed =
                matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = p;
                return Ok(());
            }
            for (k, v) in p {
                let child = join(path, &k);
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &child)?,
                    None => return Err(CliError::Config(format!("unknown config key `{child}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_owned()
    } else {
        format!("{path}.{key}")
    }
}

/// Parses `a.b.c=value`; the value is JSON when it parses, else a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let parts: Vec<String> = key.split('.').map(str::to_owned).collect();
    if parts.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((parts, value))
}

fn nest(parts: &[String], value: Value) -> Value {
    parts.iter().rev().fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.clone(), acc);
        Value::Object(m)
    })
}

/// `base`, then the optional document, then each override in order.
pub fn layered<T: Serialize + DeserializeOwned>(
    base: &T,
    document: Option<Value>,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(doc) = document {
        merge(&mut v, doc, "")?;
    }
    for o in overrides {
        let (parts, value) = parse_override(o)?;
        merge(&mut v, nest(&parts, value), "")?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

pub fn read_document(path: &std::path::Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
