//! Plain-text `key = value` configuration files.

use std::path::Path;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    Value { key: String, value: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

impl KvError {
    pub fn value(key: &str, value: &str) -> Self {
        KvError::Value {
            key: key.to_string(),
            value: value.to_string(),
        }
    }
}

/// Ordered `(key, value)` pairs; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(KvError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(KvError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, KvError> {
    let text = std::fs::read_to_string(path).map_err(|e| KvError::Io(e.to_string()))?;
    parse_kv(&text)
}

pub fn write_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool, KvError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(KvError::value(key, value)),
    }
}

/// Comma-separated list; empty items are dropped.
pub fn parse_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
