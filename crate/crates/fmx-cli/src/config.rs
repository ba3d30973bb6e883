//! Run configuration: a TOML file flattened to dotted keys, overridable by
//! trailing `--key value` pairs. The fully resolved map is serialized next to
//! every command's outputs for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fmx_core::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            flatten("", &toml::Value::Table(table), &mut map);
        }
        let mut cfg = Self { map };
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut it = overrides.iter();
        while let Some(flag) = it.next() {
            let key = flag.strip_prefix("--").ok_or_else(|| {
                Error::Config(format!("expected --key, found {flag:?}"))
            })?;
            let raw = it
                .next()
                .ok_or_else(|| Error::Config(format!("override --{key} is missing a value")))?;
            self.map.insert(key.to_string(), parse_value(raw));
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&toml::Value> {
        self.map.get(key)
    }

    pub fn get_str(&self, key: &str, default: &str) -> Result<String> {
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(toml::Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(Error::Config(format!("key {key} must be a string, got {other}"))),
        }
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        match self.get(key) {
            Some(toml::Value::String(s)) if !s.is_empty() => Ok(PathBuf::from(s)),
            Some(other) => Err(Error::Config(format!("key {key} must be a path string, got {other}"))),
            None => Err(Error::Config(format!("missing required key {key}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(other) => Err(Error::Config(format!(
                "key {key} must be a nonnegative integer, got {other}"
            ))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(*v as u64),
            Some(other) => Err(Error::Config(format!(
                "key {key} must be a nonnegative integer, got {other}"
            ))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(toml::Value::Float(v)) => Ok(*v),
            Some(toml::Value::Integer(v)) => Ok(*v as f64),
            Some(other) => Err(Error::Config(format!("key {key} must be a number, got {other}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(v)) => Ok(*v),
            Some(other) => Err(Error::Config(format!("key {key} must be a boolean, got {other}"))),
        }
    }

    pub fn get_usize_array(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        toml::Value::Integer(v) if *v >= 0 => out.push(*v as usize),
                        other => {
                            return Err(Error::Config(format!(
                                "key {key} must hold nonnegative integers, got {other}"
                            )))
                        }
                    }
                }
                Ok(Some(out))
            }
            Some(other) => Err(Error::Config(format!("key {key} must be an array, got {other}"))),
        }
    }

    pub fn get_f64_array(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(toml::Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        toml::Value::Float(v) => out.push(*v),
                        toml::Value::Integer(v) => out.push(*v as f64),
                        other => {
                            return Err(Error::Config(format!(
                                "key {key} must hold numbers, got {other}"
                            )))
                        }
                    }
                }
                Ok(Some(out).unwrap())
            }
            Some(other) => Err(Error::Config(format!("key {key} must be an array, got {other}"))),
        }
    }

    /// The fully resolved flat key map as sorted TOML lines.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.map {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&format_value(value));
            out.push('\n');
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

fn format_value(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => serde_json::to_string(s).expect("string encodes"),
        toml::Value::Integer(v) => v.to_string(),
        toml::Value::Float(v) => format!("{v:?}"),
        toml::Value::Boolean(v) => v.to_string(),
        toml::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(format_value).collect();
            format!("[{}]", inner.join(", "))
        }
        other => other.to_string(),
    }
}

// Overrides accept TOML literals (numbers, booleans, arrays); anything that
// does not parse is taken as a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let attempt: std::result::Result<toml::Table, _> = format!("v = {raw}").parse();
    if let Ok(table) = attempt {
        if let Some(v) = table.get("v") {
            if !matches!(v, toml::Value::String(_)) {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}
