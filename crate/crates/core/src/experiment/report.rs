//! Experiment reports and their on-disk form.
//!
//! `write_report` produces:
//!
//! * `report.json`: the full report, including per-cell wall-clock times;
//! * `metrics.csv`: one row per grid cell, columns fixed per experiment kind;
//! * `config.lock.json`: the resolved config and its fingerprint;
//! * `traces.jsonl`: block records, for episode experiments only.
//!
//! `metrics.csv` holds no timing data and is byte-identical across reruns.

use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::ExperimentConfig;

/// A flat metrics row, keyed by column name.
pub type Row = Map<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellTiming {
    pub cell: usize,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub fingerprint: String,
    pub master_seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub timings: Vec<CellTiming>,
    /// Kind-specific aggregate results.
    pub summary: Value,
    #[serde(skip)]
    pub traces: Option<String>,
}

impl ExperimentReport {
    pub fn new(kind: &str, fingerprint: String, master_seed: u64, columns: &[&str]) -> Self {
        Self {
            schema_version: super::config::SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: kind.to_string(),
            fingerprint,
            master_seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            timings: Vec::new(),
            summary: Value::Null,
            traces: None,
        }
    }

    /// Rows as CSV text with a header line.
    pub fn metrics_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(self.columns.iter().map(|c| cell_text(row.get(c))))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

fn cell_text(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

/// Recursively sorts object keys.
pub fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(String, Value)> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(
                entries
                    .into_iter()
                    .map(|(k, v)| (k, canonicalize(v)))
                    .collect(),
            )
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// SHA-256 of the canonical config JSON (the output directory is excluded).
pub fn fingerprint(config: &ExperimentConfig) -> String {
    let text = canonicalize(config.canonical_json()).to_string();
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Error)]
#[error("cannot write {}: {source}", path.display())]
pub struct ReportError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

/// Writes the report files into `out_dir`, creating it if needed, and
/// returns the paths written.
pub fn write_report(
    report: &ExperimentReport,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    let wrap = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(wrap(out_dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), ReportError> {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(wrap(&path))?;
        written.push(path);
        Ok(())
    };
    let report_json = serde_json::to_string_pretty(report).expect("report serialises");
    put("report.json", report_json + "\n")?;
    put("metrics.csv", report.metrics_csv())?;
    let lock = serde_json::json!({
        "config": canonicalize(config.canonical_json()),
        "fingerprint": report.fingerprint,
    });
    put(
        "config.lock.json",
        serde_json::to_string_pretty(&lock).expect("json") + "\n",
    )?;
    if let Some(t) = &report.traces {
        put("traces.jsonl", t.clone())?;
    }
    Ok(written)
}
