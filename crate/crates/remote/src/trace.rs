//! Replayable wire trace: one JSON object per line.
//!
//! Message lines carry `t` (fleet clock, seconds), `dir` (`in` or `out`),
//! `topic` and the decoded `msg`. After every measurement collection a
//! `collect` line snapshots the batch handed to the mission loop.

use std::io::{BufRead, Write};

use ipp_core::env::Measurement;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectRecord {
    /// 0 for the initial measurement, then one per decision step.
    pub batch: usize,
    pub t: f64,
    pub traveled: Vec<f64>,
    pub measurements: Vec<Measurement>,
}

pub struct TraceWriter {
    out: Box<dyn Write + Send>,
}

impl TraceWriter {
    pub fn new(out: impl Write + Send + 'static) -> Self {
        Self { out: Box::new(out) }
    }

    fn line(&mut self, v: &Value) {
        // Tracing is best effort; a full disk must not stall the fleet.
        let _ = serde_json::to_writer(&mut self.out, v);
        let _ = self.out.write_all(b"\n");
    }

    pub fn message(&mut self, t: f64, dir: &str, topic: &str, bytes: &[u8]) {
        let msg = serde_json::from_slice::<Value>(bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(bytes).into_owned()));
        self.line(&json!({ "t": t, "dir": dir, "topic": topic, "msg": msg }));
    }

    pub fn collect(&mut self, rec: &CollectRecord) {
        let mut v = serde_json::to_value(rec).expect("plain data");
        v.as_object_mut()
            .expect("struct")
            .insert("dir".into(), "collect".into());
        self.line(&v);
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Collect snapshots of a trace, in file order.
pub fn read_collects(input: impl BufRead) -> Result<Vec<CollectRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if v.get("dir").and_then(Value::as_str) == Some("collect") {
            let rec = serde_json::from_value(v).map_err(|e| TraceError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            out.push(rec);
        }
    }
    Ok(out)
}
