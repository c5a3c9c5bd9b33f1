//! `key = value` text with `#` comments, shared by model configs, checkpoints
//! and run files.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::FormatError;

/// One assignment with its 1-based source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `text` into assignments. Blank lines and `#` comments (whole-line
/// or trailing) are skipped; a repeated key is an error.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>, FormatError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FormatError::Config(format!("line {}: expected `key = value`", i + 1))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(FormatError::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(FormatError::Config(format!(
                "line {}: duplicate key `{key}`",
                i + 1
            )));
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V, FormatError>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| FormatError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

/// Comma-separated list; empty items are rejected.
pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>, FormatError>
where
    V::Err: Display,
{
    value
        .split(',')
        .map(|item| {
            let item = item.trim();
            if item.is_empty() {
                Err(FormatError::Config(format!("`{key}`: empty list item")))
            } else {
                parse_value(key, item)
            }
        })
        .collect()
}

pub fn join_list<V: Display>(items: &[V]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
