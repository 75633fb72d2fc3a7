//! Per-step metrics CSV: a `# config_hash=...` line, the header
//! `step,epoch,lr,loss,wall_ms`, then one row per optimizer step.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};
use crate::fsutil::write_atomic;

pub const HEADER: &str = "step,epoch,lr,loss,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: csv::Writer<File>,
}

impl MetricsWriter {
    /// Starts a fresh file holding only the hash line and the header.
    pub fn create(path: &Path, config_hash: &str) -> Result<Self> {
        write_atomic(path, format!("# config_hash={config_hash}\n{HEADER}\n").as_bytes())?;
        Self::append(path)
    }

    /// Keeps the rows with `step < keep_below` and appends after them.
    pub fn resume(path: &Path, config_hash: &str, keep_below: u64) -> Result<Self> {
        let file = File::open(path).at(path)?;
        let mut lines = BufReader::new(file).lines();
        let first = lines.next().transpose().at(path)?.unwrap_or_default();
        if first != format!("# config_hash={config_hash}") {
            return Err(CliError::usage(format!("{} was written under a different config", path.display())));
        }
        let mut kept = format!("{first}\n");
        for line in lines {
            let line = line.at(path)?;
            let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if step.is_none_or(|s| s < keep_below) {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        write_atomic(path, kept.as_bytes())?;
        Self::append(path)
    }

    fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path).at(path)?;
        Ok(Self { path: path.to_path_buf(), out: csv::WriterBuilder::new().has_headers(false).from_writer(file) })
    }

    pub fn write(&mut self, row: &Row) -> Result<()> {
        self.out.serialize(row).map_err(|e| CliError::Invariant(format!("{}: {e}", self.path.display())))?;
        self.out.flush().at(&self.path)
    }
}

/// Reads every row of a metrics file.
pub fn read(path: &Path) -> Result<(String, Vec<Row>)> {
    let text = std::fs::read_to_string(path).at(path)?;
    let hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .ok_or_else(|| CliError::usage(format!("{} lacks the config hash line", path.display())))?
        .to_string();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<Row>, _>>()
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((hash, rows))
}

