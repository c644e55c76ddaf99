//! TOML config files and dotted `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Reads a TOML document; missing keys take their defaults, unknown keys
/// are rejected.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`name=toy` needs no quotes).
fn parse_value(raw: &str) -> Value {
    let parsed: std::result::Result<toml::Table, _> = toml::from_str(&format!("v = {raw}"));
    match parsed {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("present")).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` overrides. Every key must already exist in
/// `base`'s serialized form.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T> {
    let mut doc = serde_json::to_value(base)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let mut slot = &mut doc;
        for part in key.trim().split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        let mut value = parse_value(raw.trim());
        // integral floats such as `alpha=3` must stay floats
        if slot.is_f64() {
            if let Some(i) = value.as_i64() {
                value = Value::from(i as f64);
            }
        }
        *slot = value;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid override: {e}")))
}

/// Serializes `value` as TOML.
pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}
