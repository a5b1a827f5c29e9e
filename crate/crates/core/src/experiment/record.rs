//! One JSON object per line, appended and never rewritten.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::DisorderVerdict;
use crate::error::Result;
use crate::stats::MeanSe;

use super::config::canonical_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// Where the randomness of a record came from: the stream
/// `root(master).derive(tag, point)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub master: u64,
    pub tag: String,
    pub point: u64,
}

/// Named values with optional standard errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Values {
    pub values: BTreeMap<String, f64>,
    pub stderrs: BTreeMap<String, f64>,
    pub verdict: Option<DisorderVerdict>,
}

impl Values {
    /// Non-finite values are dropped: JSON cannot carry them.
    pub fn put(&mut self, name: &str, v: f64) -> &mut Self {
        if v.is_finite() {
            self.values.insert(name.to_string(), v);
        }
        self
    }

    pub fn put_se(&mut self, name: &str, m: MeanSe) -> &mut Self {
        self.put(name, m.mean);
        if m.se.is_finite() && m.mean.is_finite() {
            self.stderrs.insert(name.to_string(), m.se);
        }
        self
    }

    pub fn put_with(&mut self, name: &str, v: f64, se: f64) -> &mut Self {
        self.put_se(name, MeanSe { mean: v, se, n: 0 })
    }

    pub fn flag(&mut self, name: &str, b: bool) -> &mut Self {
        self.put(name, if b { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub kind: String,
    pub timestamp: String,
    pub config_hash: String,
    pub op: String,
    pub params: BTreeMap<String, Value>,
    pub values: BTreeMap<String, f64>,
    pub stderrs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<DisorderVerdict>,
    pub seed: SeedProvenance,
    pub wall_time_s: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRecord {
    /// Canonical JSON of everything that must be reproducible: all fields
    /// except the timestamp and the wall time.
    pub fn value_fields(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        let m = v.as_object_mut().unwrap();
        m.remove("timestamp");
        m.remove("wall_time_s");
        canonical_json(&v)
    }

    /// Canonical JSON of the parameters, used to group records.
    pub fn params_key(&self) -> String {
        canonical_json(&serde_json::to_value(&self.params).expect("params serialize"))
    }
}

/// Appends records to `path`, creating it if needed.
pub fn append_records(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

/// Reads every parseable record; the second value counts malformed lines.
pub fn read_records(path: &Path) -> Result<(Vec<ResultRecord>, usize)> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut bad = 0;
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ResultRecord>(&line) {
            Ok(r) => out.push(r),
            Err(_) => bad += 1,
        }
    }
    Ok((out, bad))
}
