//! Config file loading with `--set key=value` overrides.

use encodenet_core::pipeline::PipelineConfig;
use encodenet_core::{Error, Result};
use std::path::Path;

/// Reads a TOML experiment config, applies dotted-path overrides, and
/// deserializes. Override values parse as TOML literals first and fall
/// back to strings, so `--set head_train.epochs=12`,
/// `--set seeds=[1,2,3]`, and `--set target_mode=same_image` all work.
pub fn load(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    value
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {entry:?}")))?;
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {segment} is not a table")))?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("--set {key}: parent is not a table")))?;
    table.insert(segments[segments.len() - 1].to_string(), parse_value(raw));
    Ok(())
}
