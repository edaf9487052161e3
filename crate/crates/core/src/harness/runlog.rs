use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUNLOG_SCHEMA_VERSION: u32 = 1;

/// One JSONL row: a bundle of metrics for a job, optionally tied to a round.
/// Non-finite metric values are dropped so rows stay valid JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub schema_version: u32,
    pub job: String,
    pub seed: u64,
    pub round: Option<usize>,
    pub event: String,
    pub labels: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl Record {
    pub fn new(job: &str, seed: u64, event: &str) -> Self {
        Record {
            schema_version: RUNLOG_SCHEMA_VERSION,
            job: job.to_string(),
            seed,
            round: None,
            event: event.to_string(),
            labels: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = Some(round);
        self
    }

    pub fn label(mut self, key: &str, value: impl ToString) -> Self {
        self.labels.insert(key.to_string(), value.to_string());
        self
    }

    pub fn metric(mut self, key: &str, value: f64) -> Self {
        if value.is_finite() {
            self.metrics.insert(key.to_string(), value);
        }
        self
    }

    pub fn metric_opt(self, key: &str, value: Option<f64>) -> Self {
        match value {
            Some(v) => self.metric(key, v),
            None => self,
        }
    }

    /// Adds every numeric field of a serializable struct, with booleans as 0/1.
    pub fn metrics_from<T: Serialize>(mut self, value: &T) -> Result<Self> {
        if let serde_json::Value::Object(map) = serde_json::to_value(value)? {
            for (k, v) in map {
                match v {
                    serde_json::Value::Number(n) => self = self.metric(&k, n.as_f64().unwrap_or(f64::NAN)),
                    serde_json::Value::Bool(b) => self = self.metric(&k, b as u8 as f64),
                    _ => {}
                }
            }
        }
        Ok(self)
    }

    pub fn json_schema() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(Record)).expect("schema serializes") + "\n"
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[Record]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?), records)
}

/// Reads and validates JSONL rows; a malformed row reports its byte offset.
pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::data(offset, format!("bad runlog row: {e}")))?;
            if rec.schema_version != RUNLOG_SCHEMA_VERSION {
                return Err(Error::data(offset, format!("unsupported runlog schema {}", rec.schema_version)));
            }
            out.push(rec);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
