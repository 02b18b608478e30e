//! Layered run configuration: defaults, then the TOML file, then `--set`
//! overrides, then dedicated flags such as `--seed`.

use std::path::Path;

use fdg_core::experiment::RunConfig;
use fdg_core::Error;
use toml::{Table, Value};

fn parse_value(raw: &str) -> Value {
    // bare words that are not valid TOML values are taken as strings
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value`, creating intermediate tables as needed. Unknown
/// keys are caught later by the typed deserialization.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("malformed key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            text.parse::<Table>()
                .map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| Error::Usage(format!("invalid configuration: {e}")))?;
    if let Some(s) = seed {
        cfg.gen.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    })?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("run configuration serializes")
}
