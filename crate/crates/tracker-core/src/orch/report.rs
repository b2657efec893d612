//! Run artifacts: metrics stream, CSV tables and traces, manifest.
//!
//! The metrics file is JSON-lines with one self-describing event per
//! line and deliberately no timestamps or hostnames — two runs with the
//! same seed must produce byte-identical files. The manifest ties a run
//! together: resolved configuration hash, checkpoint content hashes, and
//! headline numbers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::OrchError;

/// Append-only JSON-lines metrics writer.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, OrchError> {
        let file = File::create(path)
            .map_err(|e| OrchError::Io(format!("cannot create {}: {e}", path.display())))?;
        Ok(MetricsWriter { out: BufWriter::new(file), path: path.to_path_buf() })
    }

    /// Writes one event line: the given fields plus an `event` tag.
    pub fn event(&mut self, name: &str, fields: serde_json::Value) -> Result<(), OrchError> {
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), json!(name));
        if let serde_json::Value::Object(m) = fields {
            for (k, v) in m {
                obj.insert(k, v);
            }
        }
        serde_json::to_writer(&mut self.out, &serde_json::Value::Object(obj))
            .map_err(|e| OrchError::Io(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| OrchError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), OrchError> {
        self.out
            .flush()
            .map_err(|e| OrchError::Io(format!("flushing {}: {e}", self.path.display())))
    }
}

/// One row of a plant trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub step: usize,
    pub theta_deg: f32,
    pub theta_dot_dps: f32,
    pub p1_kpa: f32,
    pub p2_kpa: f32,
    pub a1_kpa: f32,
    pub a2_kpa: f32,
}

/// Writes a closed-loop trace: observed state and commanded pressures.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<(), OrchError> {
    let file = File::create(path)
        .map_err(|e| OrchError::Io(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| OrchError::Io(format!("{}: {e}", path.display()));
    writeln!(w, "step,theta_deg,theta_dot_dps,p1_kpa,p2_kpa,a1_kpa,a2_kpa").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.theta_deg, r.theta_dot_dps, r.p1_kpa, r.p2_kpa, r.a1_kpa, r.a2_kpa
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes a simple named-columns table (all values formatted with
/// Display, strings passed through).
pub fn write_table_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), OrchError> {
    let file = File::create(path)
        .map_err(|e| OrchError::Io(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| OrchError::Io(format!("{}: {e}", path.display()));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String, OrchError> {
    let bytes = std::fs::read(path)
        .map_err(|e| OrchError::Io(format!("cannot hash {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Run identity and headline results, written as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Hash of the resolved canonical configuration.
    pub config_sha256: String,
    /// Content hashes of files this run produced, keyed by file name.
    pub artifacts_sha256: BTreeMap<String, String>,
    pub episodes_run: usize,
    /// Held-out evaluation history (mean MSE per evaluation point).
    pub eval_history: Vec<f64>,
    pub final_mean_mse: Option<f64>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_toml: &str) -> Self {
        Manifest {
            command: command.to_string(),
            seed,
            config_sha256: sha256_hex(config_toml.as_bytes()),
            artifacts_sha256: BTreeMap::new(),
            episodes_run: 0,
            eval_history: Vec::new(),
            final_mean_mse: None,
        }
    }

    /// Records a produced file under its base name.
    pub fn add_artifact(&mut self, path: &Path) -> Result<(), OrchError> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| OrchError::Io(format!("artifact path {} has no name", path.display())))?;
        self.artifacts_sha256.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), OrchError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| OrchError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| OrchError::Io(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, OrchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchError::Io(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| OrchError::Io(format!("{}: {e}", path.display())))
    }
}
