//! File layout of an experiment directory.
//!
//! ```text
//! experiment.json            resolved config
//! data/                      dataset split + manifest
//! grid/<variant>.json        grid scores and the chosen cell
//! runs/<variant>/seed-<s>.json
//! checkpoints/<variant>/seed-<s>.json
//! completed.json             finished (variant, seed) cells
//! results.json, results.txt
//! analysis/                  written by `analyze`
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const COMPLETED_FILE: &str = "completed.json";
pub const RESULTS_FILE: &str = "results.json";

pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

pub fn record_path(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join("runs").join(label).join(format!("seed-{seed}.json"))
}

pub fn error_path(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join("runs").join(label).join(format!("seed-{seed}.error.txt"))
}

pub fn checkpoint_path(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join("checkpoints").join(label).join(format!("seed-{seed}.json"))
}

pub fn grid_path(root: &Path, label: &str) -> PathBuf {
    root.join("grid").join(format!("{label}.json"))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes via a temporary file so an interrupted write never leaves a
/// truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
