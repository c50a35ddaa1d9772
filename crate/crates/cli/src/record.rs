//! Run records and artifact persistence.
//!
//! Every command writes `record.json` into its output directory and appends
//! the same record as one line of `records.jsonl`. The config hash is the
//! SHA-256 of the canonical JSON form of the effective configuration (keys
//! sorted, output directory excluded), so re-running an identical experiment
//! into the same directory is detected.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Process exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    /// A predicted failure (for example of the law of large numbers) was
    /// reproduced and every other check passed.
    ExpectedFailure,
    Fail,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::ExpectedFailure => 2,
            Status::Fail => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub config_hash: String,
    /// Unix time in milliseconds.
    pub started_ms: u128,
    pub finished_ms: u128,
    pub artifacts: Vec<PathBuf>,
    pub metrics: serde_json::Value,
    pub checks: Vec<Check>,
    pub status: Status,
    /// Earlier records in the same directory with the same config hash.
    pub prior_runs: usize,
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // `serde_json::Value` keeps object keys sorted, which fixes the order.
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Records previously appended to `dir/records.jsonl`.
pub fn prior_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join("records.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // Lines written by other versions are skipped rather than fatal.
        if let Ok(r) = serde_json::from_str(&line) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Output directory plus the artifacts written into it.
#[derive(Debug)]
pub struct ArtifactSink {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl ArtifactSink {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes one artifact through `fill`.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let mut buf = Vec::new();
        fill(&mut buf)?;
        fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }

    pub fn artifacts(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes `record.json` and appends to `records.jsonl`.
    pub fn finish(self, mut record: RunRecord) -> Result<RunRecord> {
        record.prior_runs = prior_records(&self.dir)?
            .iter()
            .filter(|r| r.config_hash == record.config_hash && r.experiment == record.experiment)
            .count();
        record.artifacts = self.written.clone();
        let text = serde_json::to_string_pretty(&record)?;
        fs::write(self.dir.join("record.json"), text + "\n")?;
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("records.jsonl"))?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        Ok(record)
    }
}

/// Combined status of a list of checks.
pub fn status_of(checks: &[Check]) -> Status {
    if checks.iter().all(|c| c.pass) {
        Status::Pass
    } else {
        Status::Fail
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [1, 2], "a": 1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
        let c: serde_json::Value = serde_json::from_str(r#"{"a": 2, "b": [1, 2]}"#).unwrap();
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
    }

    #[test]
    fn prior_runs_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let record = RunRecord {
            experiment: "x".into(),
            config_hash: "h".into(),
            started_ms: 0,
            finished_ms: 0,
            artifacts: vec![],
            metrics: serde_json::Value::Null,
            checks: vec![],
            status: Status::Pass,
            prior_runs: 0,
        };
        let first = ArtifactSink::new(dir.path())
            .unwrap()
            .finish(record.clone())
            .unwrap();
        assert_eq!(first.prior_runs, 0);
        let second = ArtifactSink::new(dir.path())
            .unwrap()
            .finish(record)
            .unwrap();
        assert_eq!(second.prior_runs, 1);
    }
}
