//! Loading a `PipelineConfig` from TOML or JSON with command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sleepradar_core::pipeline::PipelineConfig;

/// Raised for anything wrong with the configuration itself; maps to its own
/// exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Overlays `patch` onto `base`, recursing into tables so partial sections
/// keep their defaults.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_value(path: &Path) -> Result<Value, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display()))),
        "toml" => toml::from_str::<Value>(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display()))),
        other => Err(ConfigError(format!(
            "{}: unsupported config extension {other:?} (expected .toml or .json)",
            path.display()
        ))),
    }
}

/// Reads `path`. A top-level `cohort_spec` entry names a separate TOML/JSON
/// file (relative to the config file) that supplies the `cohort` table.
pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let mut value = read_value(path)?;
    let Value::Object(map) = &mut value else {
        return Err(ConfigError(format!("{}: top level must be a table", path.display())));
    };
    if let Some(spec) = map.remove("cohort_spec") {
        let Value::String(rel) = spec else {
            return Err(ConfigError("cohort_spec must be a path".into()));
        };
        let spec_path = path.parent().unwrap_or(Path::new(".")).join(rel);
        if map.contains_key("cohort") {
            return Err(ConfigError("give either cohort_spec or a cohort table, not both".into()));
        }
        map.insert("cohort".into(), read_value(&spec_path)?);
    }
    let mut full = serde_json::to_value(PipelineConfig::default()).map_err(|e| ConfigError(e.to_string()))?;
    merge(&mut full, value);
    serde_json::from_value(full).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub folds: Option<usize>,
}

pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<PipelineConfig, ConfigError> {
    let mut c = match path {
        Some(p) => load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(out) = &o.out {
        c.out_dir = out.clone();
    }
    if let Some(k) = o.folds {
        c.folds = k;
    }
    c.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(c)
}
