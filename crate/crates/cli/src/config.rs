//! Layering of defaults, an optional JSON config file and command-line flags.
//!
//! Config keys mirror flag names with dashes replaced by underscores, so
//! `--max-retries 5` and `{"max_retries": 5}` set the same value. Flags win.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn load(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else { return Ok(Map::new()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
        Value::Object(map) => Ok(map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()),
        _ => bail!("config {} must be a JSON object", path.display()),
    }
}

/// Merges `flags` over `config` over `R::default()` and returns the typed
/// result together with its JSON form for output headers.
pub fn resolve<R, F>(flags: &F, config: &Map<String, Value>) -> Result<(R, Value)>
where
    R: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let Value::Object(mut merged) = serde_json::to_value(R::default())? else {
        unreachable!("resolved configs are structs")
    };
    for (key, value) in config {
        if !merged.contains_key(key) {
            bail!("unknown config key `{key}`");
        }
        merged.insert(key.clone(), value.clone());
    }
    let Value::Object(flags) = serde_json::to_value(flags)? else { unreachable!("flag sets are structs") };
    for (key, value) in flags {
        if !value.is_null() {
            merged.insert(key, value);
        }
    }
    let merged = Value::Object(merged);
    let resolved = serde_json::from_value(merged.clone()).map_err(|e| anyhow!("invalid configuration: {e}"))?;
    Ok((resolved, merged))
}

pub fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| anyhow!("missing required --{flag} (flag or config key `{}`)", flag.replace('-', "_")))
}
