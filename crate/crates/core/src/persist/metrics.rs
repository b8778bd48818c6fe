//! Append-only line-delimited metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub agent: String,
    pub name: String,
    pub value: f64,
    /// Seconds since the Unix epoch.
    pub time: f64,
}

pub fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one record as a single line in one write call.
    pub fn append(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())
    }

    pub fn log(&mut self, step: u64, agent: &str, name: &str, value: f64) -> std::io::Result<()> {
        self.append(&MetricsRecord { step, agent: agent.to_string(), name: name.to_string(), value, time: now_secs() })
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

/// Reads every well-formed record; also returns the number of lines skipped as malformed
/// (a run killed mid-write can leave a partial last line).
pub fn read_metrics(path: &Path) -> std::io::Result<(Vec<MetricsRecord>, usize)> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(_) => skipped += 1,
        }
    }
    Ok((records, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/metrics.jsonl");
        let mut w = MetricsWriter::open(&path).unwrap();
        for s in 0..5 {
            w.log(s, "bob", "loss", s as f64 * 0.5).unwrap();
        }
        drop(w);
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"step\": 9, \"ag").unwrap();
        let (recs, skipped) = read_metrics(&path).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(skipped, 1);
        assert_eq!(recs[4].value, 2.0);
    }
}
