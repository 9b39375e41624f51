//! Run reports: config echo with a content hash, a timestamp isolated
//! in the meta header (so reruns compare byte-identically once it is
//! stripped), a JSON payload per command, and a long-form CSV sidecar.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Volatile header fields; everything outside `meta` is reproducible
/// from the echoed config and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    pub created_at: String,
    pub artifact_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: ReportMeta,
    pub command: String,
    pub config: Value,
    pub config_hash: String,
    pub payload: Value,
}

/// SHA-256 of the serialized config, hex encoded.
pub fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("serializable config");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunReport {
    pub fn new(command: &str, config: Value, payload: Value) -> Self {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            meta: ReportMeta {
                created_at: secs.to_string(),
                artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            command: command.to_string(),
            config_hash: config_hash(&config),
            config,
            payload,
        }
    }

    /// Serialization with the volatile meta block removed; reruns with
    /// identical config and seeds match this byte for byte.
    pub fn stable_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_value(self).expect("serializable report");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("meta");
        }
        let mut bytes = serde_json::to_vec_pretty(&v).expect("serializable report");
        bytes.push(b'\n');
        bytes
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// One per-task accuracy row of the long-form CSV sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRow {
    pub run: u64,
    pub tag: String,
    pub task: usize,
    pub accuracy: f64,
}

pub fn write_tasks_csv(path: &Path, rows: &[TaskRow]) -> Result<()> {
    let mut out = String::from("run,tag,task,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.run, r.tag, r.task, r.accuracy));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Long-form plot rows for the report command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotRow {
    pub figure_kind: String,
    pub x: String,
    pub series: String,
    pub value: f64,
}

pub fn write_plot_csv(path: &Path, rows: &[PlotRow]) -> Result<()> {
    let mut out = String::from("figure_kind,x,series,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.figure_kind, r.x, r.series, r.value
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stable_bytes_ignore_timestamp() {
        let config = json!({"seed": 1, "n": 2});
        let mut a = RunReport::new("train", config.clone(), json!({"acc": 0.5}));
        let b = RunReport::new("train", config, json!({"acc": 0.5}));
        a.meta.created_at = "999".into();
        assert_eq!(a.stable_bytes(), b.stable_bytes());
        assert_ne!(a.config_hash, "");
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn hash_tracks_config_changes() {
        let a = config_hash(&json!({"x": 1}));
        let b = config_hash(&json!({"x": 2}));
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn report_roundtrip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = RunReport::new("eval", json!({"k": true}), json!({"v": [1, 2]}));
        report.write(&path).unwrap();
        let back = RunReport::read(&path).unwrap();
        assert_eq!(back.payload, report.payload);
        assert_eq!(back.config_hash, report.config_hash);

        let csv = dir.path().join("tasks.csv");
        write_tasks_csv(
            &csv,
            &[TaskRow {
                run: 0,
                tag: "heldout".into(),
                task: 3,
                accuracy: 0.75,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text, "run,tag,task,accuracy\n0,heldout,3,0.75\n");
    }
}
