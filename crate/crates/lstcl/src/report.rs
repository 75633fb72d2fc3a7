use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lstcl_core::evaluation::EvalReport;

use crate::error::{CliError, IoContext, Result};
use crate::fsutil::write_atomic;

/// One evaluated split. Classes absent from the split have accuracy `nan`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitReport {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub n_videos: usize,
    pub n_clips: usize,
    pub frames: usize,
    pub stride: usize,
}

impl From<&EvalReport> for SplitReport {
    fn from(r: &EvalReport) -> Self {
        Self {
            top1: r.top1,
            per_class: r.per_class.iter().map(|a| a.unwrap_or(f64::NAN)).collect(),
            n_videos: r.n_videos,
            n_clips: r.n_clips,
            frames: r.frames,
            stride: r.stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub kind: String,
    pub config_hash: String,
    pub model_hash: String,
    /// Optimizer steps behind the evaluated model.
    pub steps: u64,
    pub splits: BTreeMap<String, SplitReport>,
}

impl ReportFile {
    pub fn new(kind: &str, config_hash: String, model_hash: String, steps: u64) -> Self {
        Self { kind: kind.into(), config_hash, model_hash, steps, splits: BTreeMap::new() }
    }

    pub fn with(mut self, split: &str, r: &EvalReport) -> Self {
        self.splits.insert(split.into(), r.into());
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| CliError::Invariant(format!("report: {e}")))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}
