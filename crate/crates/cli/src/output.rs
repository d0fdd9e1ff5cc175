//! Artifact writing: every file goes through a temporary file in the target
//! directory and is renamed into place, and its checksum is recorded for the
//! manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use sidthe_core::{ClosedLoopLog, SolveStatus, State};

use crate::config::Config;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config_path: Option<&'a Path>,
    pub output_dir: &'a Path,
    pub seed: u64,
    pub version: &'static str,
    pub resolved_config: &'a Config,
    /// Checksummed artifacts. Wall-clock data lives in `timings.json`,
    /// which is not listed.
    pub artifacts: &'a [Artifact],
}

pub struct OutputDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    /// Writes without recording a checksum.
    pub fn write_untracked(&self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        let dir = path.parent().unwrap_or(&self.root);
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
        tmp.write_all(bytes).map_err(|e| io_err(&path, e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(&path, e))?;
        tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write_untracked(rel, bytes)?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &mut self,
        rel: &str,
        value: &T,
    ) -> Result<(), CliError> {
        let mut text =
            serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push(b'\n');
        self.write(rel, &text)
    }

    pub fn write_csv(
        &mut self,
        rel: &str,
        header: &[String],
        rows: &[Vec<String>],
    ) -> Result<(), CliError> {
        self.write(rel, &csv_bytes(header, rows)?)
    }

    pub fn finish(
        self,
        command: &str,
        config_path: Option<&Path>,
        config: &Config,
    ) -> Result<Vec<Artifact>, CliError> {
        let mut resolved =
            serde_json::to_vec_pretty(config).map_err(|e| CliError::Runtime(e.to_string()))?;
        resolved.push(b'\n');
        self.write_untracked("config.resolved.json", &resolved)?;
        let manifest = RunManifest {
            command,
            config_path,
            output_dir: &self.root,
            seed: config.experiment.seed,
            version: env!("CARGO_PKG_VERSION"),
            resolved_config: config,
            artifacts: &self.artifacts,
        };
        let mut text =
            serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push(b'\n');
        self.write_untracked("manifest.json", &text)?;
        Ok(self.artifacts)
    }
}

pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn fmt(v: f64) -> String {
    format!("{v:e}")
}

pub fn state_header(extra: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = ["day", "S", "I", "D", "T", "H", "E", "u", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(extra.iter().map(|s| s.to_string()));
    h
}

pub fn state_row(day: usize, x: &State, u: Option<f64>, status: &str) -> Vec<String> {
    let mut r = vec![day.to_string()];
    r.extend(x.as_array().iter().map(|&v| fmt(v)));
    r.push(u.map(fmt).unwrap_or_default());
    r.push(status.to_string());
    r
}

/// Daily rows of a closed-loop run. The last row is the final state, with
/// no control applied.
pub fn log_rows(log: &ClosedLoopLog) -> Vec<Vec<String>> {
    log.states
        .iter()
        .enumerate()
        .map(|(d, x)| {
            let u = log.daily_controls.get(d).copied();
            let status = log
                .daily_status
                .get(d)
                .map(SolveStatus::to_string)
                .unwrap_or_default();
            let mut row = state_row(d, x, u, &status);
            if let Some(flags) = &log.in_safe_set {
                row.push(flags[d].to_string());
            }
            row
        })
        .collect()
}
