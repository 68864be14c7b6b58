//! Dataset directory layout: `manifest.json` plus one trajectory file per
//! split member under `train/`, `val/`, `test/`. The manifest records the
//! generator parameters, the split membership, and the residual report of
//! the governing-equation check that gated generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use upt_core::datagen::{read_trajectory, Trajectory};
use upt_core::train::TaskKind;

use crate::{usage, CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Finite-difference residuals of the analytic fields, measured before any
/// file is written. Only the fields relevant to the task are present.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum_residual_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heat_residual_max: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Generator name: "tgv2d" or "diffusion2d".
    pub task: String,
    pub seed: u64,
    /// Points per frame.
    pub k: usize,
    /// Frames per trajectory.
    pub steps: usize,
    pub dt: f64,
    /// Physical coefficient: viscosity (tgv2d) or diffusivity (diffusion2d).
    pub coefficient: f64,
    /// Heat blobs per trajectory (diffusion2d only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blobs: Option<usize>,
    pub count: usize,
    /// Split name -> relative trajectory file paths, in order.
    pub splits: BTreeMap<String, Vec<String>>,
    pub residuals: ResidualReport,
}

impl DatasetManifest {
    pub fn task_kind(&self) -> CliResult<TaskKind> {
        match self.task.as_str() {
            "tgv2d" => Ok(TaskKind::Lagrangian),
            "diffusion2d" => Ok(TaskKind::Eulerian),
            other => Err(CliError::Runtime(format!("manifest has unknown task '{other}'"))),
        }
    }
}

pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Runtime(format!("serializing manifest: {e}")))?;
    fs::write(dir.join(MANIFEST_NAME), text + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> CliResult<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)
        .map_err(|e| usage(format!("cannot read dataset manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("manifest {}: {e}", path.display())))
}

/// Loads every trajectory of one split, in manifest order. An absent split
/// yields an empty vector; a listed-but-missing file is a runtime error.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: &str) -> CliResult<Vec<Trajectory>> {
    let Some(files) = manifest.splits.get(split) else {
        return Ok(Vec::new());
    };
    files
        .iter()
        .map(|rel| read_trajectory(&dir.join(rel)).map_err(CliError::from))
        .collect()
}
