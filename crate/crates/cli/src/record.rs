//! Run records: one header line per run plus per-image rows.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use lfmark_core::adapters::BackendInfo;
use lfmark_core::attacks::JPEG_CODEC;
use lfmark_core::Decision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;
use crate::io::JsonlWriter;

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const RUNS_FILE: &str = "runs.jsonl";
pub const ROWS_FILE: &str = "rows.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub command: String,
    pub config: serde_json::Value,
    /// Command arguments that are not part of the config file.
    pub arguments: serde_json::Value,
    pub backends: Vec<BackendInfo>,
    pub seeds: BTreeMap<String, u64>,
    pub jpeg_codec: String,
    pub key_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub run_id: String,
    pub image: String,
    pub attack: String,
    pub bit_accuracy: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub matched_bits: usize,
    pub decision: Decision,
    pub p_value: f64,
}

/// Deterministic id over everything that determines the run's numbers.
pub fn run_id(command: &str, config: &serde_json::Value, arguments: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(config.to_string().as_bytes());
    h.update([0]);
    h.update(arguments.to_string().as_bytes());
    hex::encode(&h.finalize()[..8])
}

impl RunRecord {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        arguments: serde_json::Value,
        backends: Vec<BackendInfo>,
        seeds: BTreeMap<String, u64>,
        key_id: Option<String>,
    ) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            schema_version: RECORD_SCHEMA_VERSION,
            run_id: run_id(command, &config, &arguments),
            timestamp,
            command: command.to_string(),
            config,
            arguments,
            backends,
            seeds,
            jpeg_codec: JPEG_CODEC.to_string(),
            key_id,
        }
    }

    /// Appends this record to `dir/runs.jsonl`.
    pub fn append_to(&self, dir: &Path) -> CliResult<()> {
        JsonlWriter::append(&dir.join(RUNS_FILE))?.write(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn run_id_is_deterministic_and_sensitive() {
        let a = run_id("embed", &json!({"steps": 1}), &json!({}));
        assert_eq!(a, run_id("embed", &json!({"steps": 1}), &json!({})));
        assert_ne!(a, run_id("embed", &json!({"steps": 2}), &json!({})));
        assert_ne!(a, run_id("sweep", &json!({"steps": 1}), &json!({})));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let r = RunRecord::new("detect", json!({}), json!({}), vec![], BTreeMap::new(), None);
        r.append_to(dir.path()).unwrap();
        r.append_to(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(RUNS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: RunRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
