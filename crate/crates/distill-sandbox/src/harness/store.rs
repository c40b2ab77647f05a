//! On-disk layout of one experiment run.
//!
//! Everything a run produces lives under one root: datasets in `data/`,
//! model checkpoints in `models/`, cached teacher labels in `labels/`,
//! measured metrics in `eval/`, and plot-ready CSV tables in `tables/`.
//! `run.json` records the config hash and, per completed stage, the content
//! id of every artifact, so a resumed run can trust what it finds. Nothing
//! here embeds timestamps; two runs of the same config produce identical
//! bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> RunDirs {
        RunDirs { root: root.into() }
    }

    pub fn ensure(&self) -> Result<()> {
        for dir in ["data", "models", "labels", "eval", "tables"] {
            let path = self.root.join(dir);
            std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn matrix(&self) -> PathBuf {
        self.root.join("data/matrix.json")
    }

    pub fn teacher_train(&self) -> PathBuf {
        self.root.join("data/train-teacher.bin")
    }

    pub fn student_train(&self) -> PathBuf {
        self.root.join("data/train-student.bin")
    }

    pub fn eval_set(&self) -> PathBuf {
        self.root.join("data/eval.bin")
    }

    pub fn teacher_model(&self) -> PathBuf {
        self.root.join("models/teacher.ckpt")
    }

    pub fn teacher_trace(&self) -> PathBuf {
        self.root.join("models/teacher-trace.json")
    }

    pub fn teacher_checkpoint(&self, step: u64) -> PathBuf {
        self.root.join(format!("models/teacher-step{step:05}.ckpt"))
    }

    pub fn student_model(&self, arm: &str, seed: u64) -> PathBuf {
        self.root.join(format!("models/student-{arm}-s{seed}.ckpt"))
    }

    pub fn student_trace(&self, arm: &str, seed: u64) -> PathBuf {
        self.root.join(format!("models/student-{arm}-s{seed}-trace.json"))
    }

    pub fn student_checkpoint(&self, arm: &str, seed: u64, step: u64) -> PathBuf {
        self.root.join(format!("models/student-{arm}-s{seed}-step{step:05}.ckpt"))
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels/teacher-labels.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("eval/metrics.json")
    }

    pub fn complexity(&self) -> PathBuf {
        self.root.join("eval/complexity.json")
    }

    pub fn table(&self, name: &str) -> PathBuf {
        self.root.join(format!("tables/{name}.csv"))
    }
}

/// Pretty JSON written through a temp file and atomically renamed into
/// place, with a trailing newline.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.into(), detail: e.to_string() })
}

/// What a resumed run knows about its predecessor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Stage name to artifact file name to content id.
    pub stages: BTreeMap<String, BTreeMap<String, String>>,
}

impl RunManifest {
    /// Loads the manifest if present, checking it belongs to this config;
    /// starts a fresh one otherwise.
    pub fn load_or_new(path: &Path, config_hash: &str) -> Result<RunManifest> {
        if !path.exists() {
            return Ok(RunManifest { config_hash: config_hash.into(), stages: BTreeMap::new() });
        }
        let manifest: RunManifest = read_json(path)?;
        if manifest.config_hash != config_hash {
            return Err(Error::Stage {
                stage: "resume".into(),
                detail: format!(
                    "output directory holds a run of config {}, not {config_hash}; \
                     use a fresh --out",
                    manifest.config_hash
                ),
            });
        }
        Ok(manifest)
    }

    pub fn record(&mut self, stage: &str, artifacts: BTreeMap<String, String>) {
        self.stages.insert(stage.into(), artifacts);
    }

    pub fn completed(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }
}

/// Shortest round-trip decimal form of a float, the only float format the
/// tables use.
pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Writes a CSV table: `# key: value` provenance lines, a header, rows.
/// Fields must not contain commas or line breaks; no escaping is defined.
pub fn write_table(
    path: &Path,
    provenance: &[(&str, String)],
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut text = String::new();
    for (key, value) in provenance {
        if value.contains('\n') {
            return Err(Error::InvalidArgument(format!("provenance {key} spans lines")));
        }
        text.push_str(&format!("# {key}: {value}\n"));
    }
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!(
                "row of {} fields under {} columns",
                row.len(),
                header.len()
            )));
        }
        for field in row {
            if field.contains(',') || field.contains('\n') {
                return Err(Error::InvalidArgument(format!("field {field:?} needs escaping")));
            }
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
