//! `metrics.jsonl`: one [`MetricsRecord`] per line, ordered by (step, layer).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Append-only writer that refuses out-of-order rows.
pub struct MetricsLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last: Option<(u64, usize)>,
}

impl MetricsLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLogWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last: None,
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        let key = (rec.step, rec.layer);
        if self.last.is_some_and(|last| key <= last) {
            return Err(Error::contract(format!(
                "metrics row {key:?} is not after {:?}",
                self.last
            )));
        }
        self.last = Some(key);
        let line = serde_json::to_string(rec).map_err(|e| Error::MetricsLog {
            path: self.path.clone(),
            reason: e.to_string(),
        })?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<MetricsRecord> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line).map_err(|e| Error::MetricsLog {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        if let Some(prev) = rows.last() {
            if (rec.step, rec.layer) <= (prev.step, prev.layer) {
                return Err(Error::MetricsLog {
                    path: path.to_path_buf(),
                    reason: format!("line {} is out of (step, layer) order", n + 1),
                });
            }
        }
        rows.push(rec);
    }
    Ok(rows)
}

/// CSV with the same columns as the JSON log.
pub fn export_csv<W: Write>(rows: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv export: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}
