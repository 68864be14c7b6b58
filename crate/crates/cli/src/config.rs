//! Run configuration: one JSON document with model/train/data/eval sections,
//! every field defaulted, unknown keys rejected, dotted-path overrides via
//! --set. The fully resolved config is echoed into the run directory so a
//! run can be reproduced from its artifacts alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use upt_core::model::UptConfig;
use upt_core::train::TrainConfig;

use crate::{usage, CliError, CliResult};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: UptConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Normalize features in signed-log space (for heavy-tailed channels).
    pub log_scale: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { log_scale: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Latent-rollout length used by `eval` for the correlation time.
    pub rollout_steps: usize,
    /// Pearson threshold below which the rollout counts as decorrelated.
    pub correlation_threshold: f64,
    /// Restrict the correlation metric to one feature channel.
    pub correlation_channel: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { rollout_steps: 20, correlation_threshold: 0.8, correlation_channel: None }
    }
}

const SECTIONS: [&str; 4] = ["model", "train", "data", "eval"];

/// Reads the config file (or starts from `{}`), applies --set overrides,
/// and validates against the schema. All failures are usage errors.
pub fn load_run_config(path: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    let mut root: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for spec in sets {
        apply_set(&mut root, spec)?;
    }
    deserialize_run_config(root)
}

/// Applies one `path.to.key=value` override. The value is parsed as JSON
/// when possible (numbers, booleans, null, arrays) and falls back to a
/// plain string, so `--set train.peak_lr=1e-3` works without quoting.
fn apply_set(root: &mut Value, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--set {spec}: expected KEY=VALUE")))?;
    let parts: Vec<&str> = path.split('.').collect();
    if path.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("--set {spec}: empty key segment")));
    }
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| usage(format!("--set {path}: '{part}' is not an object")))?;
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let leaf = parts[parts.len() - 1];
    cur.as_object_mut()
        .ok_or_else(|| usage(format!("--set {path}: parent of '{leaf}' is not an object")))?
        .insert(leaf.to_string(), value);
    Ok(())
}

/// Section-by-section deserialization so schema errors carry a JSON path
/// prefix ("train: unknown field `lr`...").
fn deserialize_run_config(root: Value) -> CliResult<RunConfig> {
    let obj = match root {
        Value::Object(map) => map,
        other => {
            return Err(usage(format!(
                "config root must be a JSON object, found {}",
                json_kind(&other)
            )))
        }
    };
    for key in obj.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            return Err(usage(format!(
                "{key}: unknown section (expected one of {})",
                SECTIONS.join("/")
            )));
        }
    }
    let section = |name: &str| -> Value {
        obj.get(name).cloned().unwrap_or(Value::Object(Default::default()))
    };
    let model: UptConfig = serde_json::from_value(section("model"))
        .map_err(|e| usage(format!("model: {e}")))?;
    let train: TrainConfig = serde_json::from_value(section("train"))
        .map_err(|e| usage(format!("train: {e}")))?;
    let data: DataSection = serde_json::from_value(section("data"))
        .map_err(|e| usage(format!("data: {e}")))?;
    let eval: EvalSection = serde_json::from_value(section("eval"))
        .map_err(|e| usage(format!("eval: {e}")))?;
    Ok(RunConfig { model, train, data, eval })
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Writes the fully resolved config as pretty JSON (stable field order).
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
    fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}
