//! Metrics files and checkpoints.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use warpgrad_core::tasks::RngState;

use crate::error::{io_err, HarnessError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A CSV file with a fixed header.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
    columns: usize,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

impl CsvSink {
    /// Creates (or truncates) `path` and writes the header.
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(csv_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            columns: header.len(),
        })
    }

    /// Reopens `path` for a resumed run.
    ///
    /// Rows whose leading meta-step fails `keep` are dropped, so steps redone
    /// after the checkpoint are not written twice. A missing file, or one with
    /// another header, is recreated.
    pub fn resume(path: &Path, header: &[&str], keep: impl Fn(usize) -> bool) -> Result<Self> {
        let Ok(text) = std::fs::read_to_string(path) else {
            return Self::create(path, header);
        };
        let mut lines = text.lines();
        if lines.next() != Some(header.join(",").as_str()) {
            return Self::create(path, header);
        }
        let mut kept = String::new();
        kept.push_str(&header.join(","));
        kept.push('\n');
        for line in lines {
            let step = line.split(',').next().and_then(|f| f.parse::<usize>().ok());
            if step.is_some_and(&keep) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        std::fs::write(path, kept).map_err(io_err(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
            columns: header.len(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.columns, "row width differs from header");
        self.writer.write_record(fields).map_err(csv_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// A resumable snapshot of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<S> {
    pub version: u32,
    pub experiment: String,
    pub config_digest: String,
    pub meta_step: usize,
    /// Streams the next meta-step draws from.
    pub rng: Vec<RngState>,
    pub state: S,
}

impl<S: Serialize + DeserializeOwned> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// Loads a checkpoint, rejecting other format versions, experiments and configs.
    pub fn load(path: &Path, experiment: &str, config_digest: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let json_err = |source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        };
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(HarnessError::CheckpointVersion {
                path: path.to_path_buf(),
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Self = serde_json::from_value(raw).map_err(json_err)?;
        if ck.experiment != experiment || ck.config_digest != config_digest {
            return Err(HarnessError::CheckpointConfig { path: path.to_path_buf() });
        }
        Ok(ck)
    }
}
