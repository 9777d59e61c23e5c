//! Run log: a header line carrying the config fingerprint, then one line per query.

use std::io::{BufRead, Write};

use rar_core::rank::Prediction;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub fingerprint: String,
    pub tool_version: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub retrieve_ms: f64,
    pub rank_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    /// Set when this query failed before a prediction existed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header(LogHeader),
    Query(QueryRecord),
}

pub fn write_log<W: Write>(header: &LogHeader, records: &[QueryRecord], mut out: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, &LogLine::Header(header.clone()))?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, &LogLine::Query(r.clone()))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_log<R: BufRead>(reader: R) -> Result<(LogHeader, Vec<QueryRecord>), CliError> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(CliError::data)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine =
            serde_json::from_str(&line).map_err(|e| CliError::data(format!("log line {}: {e}", i + 1)))?;
        match (parsed, header.is_some()) {
            (LogLine::Header(h), false) if records.is_empty() => header = Some(h),
            (LogLine::Header(_), _) => return Err(CliError::data(format!("log line {}: second header", i + 1))),
            (LogLine::Query(_), false) => return Err(CliError::data("log does not start with a header")),
            (LogLine::Query(r), true) => records.push(r),
        }
    }
    let header = header.ok_or_else(|| CliError::data("empty log"))?;
    Ok((header, records))
}
