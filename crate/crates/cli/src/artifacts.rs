//! Files written into run directories and read back by later commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use splitcomp_core::model::checkpoint::manifest_path;

use crate::error::{CliError, CliResult};

pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";
pub const LOG_FILE: &str = "log.csv";

/// Outcome of `train` for a student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub recipe: String,
    pub seed: u64,
    pub arch: String,
    pub split_point: String,
    pub channels: usize,
    pub input_shape: [usize; 3],
    pub bottleneck_shape: Vec<usize>,
    /// Validation top-1 of the unquantized student, in [0, 1].
    pub top1: f64,
    pub teacher_top1: f64,
    pub param_digest: String,
}

/// Outcome of `eval`: accuracy with and without the codec on the head/tail boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub samples: usize,
    pub float_top1: f64,
    /// Top-1 and payload size per codec.
    pub codecs: BTreeMap<String, CodecResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecResult {
    pub top1: f64,
    pub payload_bytes: u64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|_| CliError::Missing(vec![path.to_path_buf()]))?;
    Ok(serde_json::from_str(&text)?)
}

/// Files a completed training run must contain.
pub fn run_files(dir: &Path) -> [PathBuf; 3] {
    [manifest_path(dir), dir.join(SUMMARY_FILE), dir.join(LOG_FILE)]
}

/// Every file missing from the given run directories.
pub fn missing_run_files(dirs: &[PathBuf]) -> Vec<PathBuf> {
    dirs.iter().flat_map(|d| run_files(d)).filter(|p| !p.exists()).collect()
}
