//! TOML config files with command-line overrides, and resolved-config snapshots.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const RESOLVED_FILE: &str = "resolved_config.toml";

/// A problem with user-supplied configuration; maps to the config exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Dotted-key overrides collected from flags; `None` values are skipped.
#[derive(Default)]
pub struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: Option<impl Into<toml::Value>>) -> &mut Self {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.into()));
        }
        self
    }
}

fn insert(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| config_error(format!("`{part}` in `{key}` is not a table")))?;
    }
    Ok(())
}

/// Reads `path` (or starts empty), applies `overrides` and deserializes.
/// Unset fields take their defaults.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &Overrides) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in &overrides.0 {
        insert(&mut table, k, v.clone())?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| config_error(format!("invalid config: {e}")))
}

/// Writes the effective configuration of a run next to its outputs.
pub fn persist<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a, T> {
        command: &'a str,
        config: &'a T,
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text =
        toml::to_string_pretty(&Snapshot { command, config }).context("serializing resolved config")?;
    let path = dir.join(RESOLVED_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
