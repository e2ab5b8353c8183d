//! Command-line run configuration: a JSON document with every [`RunConfig`]
//! field at the top level plus `dataset` and `output`, and dotted-path
//! `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use agam_core::engine::RunConfig;
use serde_json::Value;

use crate::error::{Error, Result};

const DATASET: &str = "dataset";
const OUTPUT: &str = "output";

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    /// Dataset manifest.
    pub dataset: Option<PathBuf>,
    /// Run directory for checkpoints and the metric log.
    pub output: PathBuf,
    pub run: RunConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            dataset: None,
            output: PathBuf::from("run"),
            run: RunConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.run).expect("run config serializes");
        let obj = v.as_object_mut().expect("run config is an object");
        obj.insert(
            DATASET.into(),
            self.dataset
                .as_ref()
                .map_or(Value::Null, |p| Value::String(p.display().to_string())),
        );
        obj.insert(OUTPUT.into(), Value::String(self.output.display().to_string()));
        v
    }

    pub fn from_value(mut v: Value) -> Result<Self> {
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        let path = |v: Option<Value>, what: &str| -> Result<Option<PathBuf>> {
            match v {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
                Some(other) => Err(Error::Config(format!("`{what}` must be a path string, got {other}"))),
            }
        };
        let dataset = path(obj.remove(DATASET), DATASET)?;
        let output = path(obj.remove(OUTPUT), OUTPUT)?.unwrap_or_else(|| PathBuf::from("run"));
        let run: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        run.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(CliConfig { dataset, output, run })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("value serializes");
        s.push('\n');
        s
    }
}

/// Recursively overlays `over` onto `base`. Keys unknown to `base` are kept
/// so that deserialization reports them.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Dotted paths of every leaf (array elements by index).
pub fn leaf_keys(v: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(m) if !m.is_empty() => m.iter().for_each(|(k, c)| walk(c, &join(k), out)),
            Value::Array(a) if !a.is_empty() => a.iter().enumerate().for_each(|(i, c)| walk(c, &join(&i.to_string()), out)),
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}

fn lookup<'a>(v: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(v, |cur, part| match cur {
        Value::Object(m) => m.get_mut(part),
        Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
        _ => None,
    })
}

/// Applies one `key=value` override. The value is read as JSON when it
/// parses, otherwise as a bare string.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let keys = leaf_keys(config);
    let slot = match lookup(config, key) {
        Some(slot) if !slot.is_object() && !slot.is_array() => slot,
        _ => {
            return Err(Error::Config(format!(
                "unknown configuration key `{key}`; valid keys are:\n  {}",
                keys.join("\n  ")
            )))
        }
    };
    *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Reads `path` over the defaults (or the defaults alone) and applies the
/// overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
    let mut v = CliConfig::default().to_value();
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: configuration must be a JSON object", path.display())));
        }
        merge(&mut v, file);
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    CliConfig::from_value(v)
}

/// Valid override keys of the default configuration.
pub fn default_keys() -> Vec<String> {
    leaf_keys(&CliConfig::default().to_value())
}
