use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Overlays a TOML file onto `base`: keys present in the file win, nested
/// tables merge key by key.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, file: &Path) -> Result<T> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let patch: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
    let mut merged = toml::Table::try_from(base).context("options are not a table")?;
    merge(&mut merged, patch);
    toml::Value::Table(merged)
        .try_into()
        .with_context(|| format!("invalid options in {}", file.display()))
}

fn merge(into: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
