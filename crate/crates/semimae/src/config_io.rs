//! TOML configuration with flat dotted keys (`ssl.tau = 0.95`), command-line
//! `key=value` overrides, and a canonical rendering of a resolved config.
//!
//! The optional top-level key `preset` selects the base values (`desk` or
//! `vit_small`) before the remaining keys are applied.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use semimae_core::{Error as CoreError, TrainConfig};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("malformed override `{0}`, expected key=value")]
    Override(String),
    #[error(transparent)]
    Validation(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub fn preset(name: &str) -> Option<TrainConfig> {
    match name {
        "desk" => Some(TrainConfig::desk()),
        "vit_small" => Some(TrainConfig::vit_small()),
        _ => None,
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("section is a table");
        }
        t.insert(leaf.to_string(), v.clone());
    }
    root
}

/// All keys of a config with their current values.
pub fn flat_entries(cfg: &TrainConfig) -> BTreeMap<String, Value> {
    let table = match Value::try_from(cfg) {
        Ok(Value::Table(t)) => t,
        _ => panic!("config serializes to a table"),
    };
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out);
    out
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn deserialize(flat: &BTreeMap<String, Value>) -> std::result::Result<TrainConfig, String> {
    Value::Table(unflatten(flat))
        .try_into::<TrainConfig>()
        .map_err(|e| e.message().to_string())
}

/// Applies `entries` on top of `base`, then validates.
pub fn resolve<I>(base: &TrainConfig, entries: I) -> Result<TrainConfig>
where
    I: IntoIterator<Item = (String, Value)>,
{
    let mut flat = flat_entries(base);
    for (key, value) in entries {
        let current = flat
            .get(&key)
            .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        let value = match (current, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        if kind(current) != kind(&value) {
            return Err(ConfigError::InvalidValue {
                key,
                message: format!("expected {}, found {}", kind(current), kind(&value)),
            });
        }
        let previous = flat.insert(key.clone(), value);
        if let Err(message) = deserialize(&flat) {
            flat.insert(key.clone(), previous.expect("key exists"));
            return Err(ConfigError::InvalidValue { key, message });
        }
    }
    let cfg = deserialize(&flat).map_err(ConfigError::Syntax)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses config text. Sections may be written as tables or as dotted keys.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let base = match table.remove("preset") {
        None => TrainConfig::default(),
        Some(Value::String(name)) => preset(&name).ok_or_else(|| ConfigError::InvalidValue {
            key: "preset".into(),
            message: format!("unknown preset `{name}` (expected desk or vit_small)"),
        })?,
        Some(other) => {
            return Err(ConfigError::InvalidValue {
                key: "preset".into(),
                message: format!("expected string, found {}", kind(&other)),
            })
        }
    };
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    resolve(&base, flat)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to
/// a bare string (`data.source=synthetic`).
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(arg.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(arg.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Loads `path` (or the defaults) and applies the overrides in order.
pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&base, overrides)
}

pub fn apply_overrides(base: &TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    let entries = overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>>>()?;
    resolve(base, entries)
}

/// Every key, one `key = value` line each, sorted. Parses back to the same
/// config.
pub fn render_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for (k, v) in flat_entries(cfg) {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
