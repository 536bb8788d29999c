//! TOML run configuration layered over parsed flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::failure::{Context, Failure};
use crate::Globals;

const SECTIONS: [&str; 9] = [
    "taxonomy",
    "standardize",
    "split",
    "fit-repr",
    "grid",
    "compare",
    "eval",
    "export-errors",
    "serve",
];

pub struct ConfigFile {
    path: PathBuf,
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, Failure> {
        let text = std::fs::read_to_string(path).at(path)?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        for (key, value) in &table {
            if value.is_table() && !SECTIONS.contains(&key.as_str()) {
                return Err(Failure::Usage(format!("{}: unknown section [{key}]", path.display())));
            }
        }
        Ok(ConfigFile {
            path: path.to_path_buf(),
            table,
        })
    }

    pub fn apply_globals(&self, globals: Globals) -> Result<Globals, Failure> {
        let scalars = self.table.iter().filter(|(_, v)| !v.is_table());
        overlay(globals, scalars, &self.path, "")
    }

    pub fn apply_section<T: Serialize + DeserializeOwned>(&self, name: &str, args: T) -> Result<T, Failure> {
        match self.table.get(name).and_then(toml::Value::as_table) {
            Some(section) => overlay(args, section.iter(), &self.path, &format!("[{name}] ")),
            None => Ok(args),
        }
    }
}

/// Replaces fields of `base` with same-named config entries. Keys use the
/// snake_case field names; dashes are accepted as well.
fn overlay<'a, T: Serialize + DeserializeOwned>(
    base: T,
    entries: impl Iterator<Item = (&'a String, &'a toml::Value)>,
    path: &Path,
    scope: &str,
) -> Result<T, Failure> {
    let usage = |msg: String| Failure::Usage(format!("{}: {scope}{msg}", path.display()));
    let mut fields: Map<String, Value> = match serde_json::to_value(&base)? {
        Value::Object(map) => map,
        _ => unreachable!("argument structs serialize to objects"),
    };
    for (key, value) in entries {
        let field = key.replace('-', "_");
        if !fields.contains_key(&field) {
            return Err(usage(format!("unknown option `{key}`")));
        }
        fields.insert(field, serde_json::to_value(value)?);
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| usage(e.to_string()))
}
