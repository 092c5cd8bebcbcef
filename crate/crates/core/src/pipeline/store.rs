//! On-disk run layout: `<root>/<run-id>/{config.json, traces.jsonl, metrics.json}`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{IterationTrace, PipelineError, RunConfig, RunRecord};
use crate::corpus::{Dataset, TaskKind};
use crate::metrics::MetricsBlock;

pub(crate) fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// A fresh, sortable run id such as `20261019T101500123Z-ids`.
pub fn new_run_id(label: &str) -> String {
    format!("{}-{label}", chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub task: TaskKind,
    pub train_size: usize,
    pub test_size: usize,
}

impl DatasetInfo {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            name: dataset.name.clone(),
            task: dataset.task,
            train_size: dataset.train.len(),
            test_size: dataset.test.len(),
        }
    }
}

/// Contents of `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub dataset: DatasetInfo,
    pub config: RunConfig,
    /// Caller-specific settings (e.g. the fully resolved CLI configuration).
    #[serde(default)]
    pub settings: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    completed_at: String,
    metrics: MetricsBlock,
}

/// One run directory. Traces are appended as queries finish; a query that is
/// re-run appends a newer trace which supersedes the older one on load.
/// Writing `metrics.json` seals the run.
pub struct RunDir {
    path: PathBuf,
    sink: Mutex<Option<File>>,
}

impl RunDir {
    const CONFIG: &'static str = "config.json";
    const TRACES: &'static str = "traces.jsonl";
    const METRICS: &'static str = "metrics.json";

    pub fn create(root: &Path, manifest: &RunManifest) -> Result<Self, PipelineError> {
        let path = root.join(&manifest.run_id);
        let dir = Self {
            path,
            sink: Mutex::new(None),
        };
        if dir.path.exists() {
            return Err(dir.error("run directory already exists"));
        }
        fs::create_dir_all(&dir.path).map_err(|e| dir.error(e))?;
        let json = serde_json::to_string_pretty(manifest).map_err(|e| dir.error(e))?;
        fs::write(dir.path.join(Self::CONFIG), json + "\n").map_err(|e| dir.error(e))?;
        Ok(dir)
    }

    pub fn open(root: &Path, run_id: &str) -> Result<Self, PipelineError> {
        let dir = Self {
            path: root.join(run_id),
            sink: Mutex::new(None),
        };
        if !dir.path.join(Self::CONFIG).is_file() {
            return Err(dir.error("no such run (missing config.json)"));
        }
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub(crate) fn error(&self, message: impl ToString) -> PipelineError {
        PipelineError::Store {
            path: self.path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub fn embedding_cache_path(&self) -> PathBuf {
        self.path.join("embeddings.jsonl")
    }

    pub fn session_path(&self) -> PathBuf {
        self.path.join("session.jsonl")
    }

    pub fn is_complete(&self) -> bool {
        self.path.join(Self::METRICS).is_file()
    }

    pub fn manifest(&self) -> Result<RunManifest, PipelineError> {
        let text = fs::read_to_string(self.path.join(Self::CONFIG)).map_err(|e| self.error(e))?;
        serde_json::from_str(&text).map_err(|e| self.error(format!("config.json: {e}")))
    }

    pub fn append_trace(&self, trace: &IterationTrace) -> Result<(), PipelineError> {
        let line = serde_json::to_string(trace).map_err(|e| self.error(e))?;
        let mut sink = self.sink.lock();
        if sink.is_none() {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.path.join(Self::TRACES))
                .map_err(|e| self.error(e))?;
            *sink = Some(file);
        }
        let file = sink.as_mut().expect("sink opened above");
        writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| self.error(e))
    }

    /// The latest trace per query, sorted by query id.
    pub fn load_traces(&self) -> Result<Vec<IterationTrace>, PipelineError> {
        let path = self.path.join(Self::TRACES);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = File::open(&path).map_err(|e| self.error(e))?;
        let mut latest = std::collections::BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| self.error(e))?;
            if line.trim().is_empty() {
                continue;
            }
            let trace: IterationTrace =
                serde_json::from_str(&line).map_err(|e| self.error(format!("traces.jsonl line {}: {e}", i + 1)))?;
            latest.insert(trace.query_id, trace);
        }
        Ok(latest.into_values().collect())
    }

    /// Write `metrics.json`, sealing the run. Returns the completion time.
    pub fn write_metrics(&self, metrics: &MetricsBlock) -> Result<String, PipelineError> {
        if self.is_complete() {
            return Err(self.error("run is already complete"));
        }
        let completed_at = timestamp();
        let file = MetricsFile {
            completed_at: completed_at.clone(),
            metrics: metrics.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| self.error(e))?;
        fs::write(self.path.join(Self::METRICS), json + "\n").map_err(|e| self.error(e))?;
        Ok(completed_at)
    }

    /// The completed metrics, if the run is sealed.
    pub fn metrics(&self) -> Result<Option<(String, MetricsBlock)>, PipelineError> {
        let path = self.path.join(Self::METRICS);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| self.error(e))?;
        let file: MetricsFile = serde_json::from_str(&text).map_err(|e| self.error(format!("metrics.json: {e}")))?;
        Ok(Some((file.completed_at, file.metrics)))
    }

    pub fn load_record(&self) -> Result<RunRecord, PipelineError> {
        let manifest = self.manifest()?;
        let traces = self.load_traces()?;
        let (completed_at, metrics) = match self.metrics()? {
            Some((at, m)) => (Some(at), Some(m)),
            None => (None, None),
        };
        Ok(RunRecord {
            run_id: manifest.run_id,
            created_at: manifest.created_at,
            completed_at,
            dataset: manifest.dataset,
            config: manifest.config,
            traces,
            metrics,
        })
    }
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, dataset: &Dataset, config: RunConfig) -> Self {
        Self {
            run_id: run_id.into(),
            created_at: timestamp(),
            dataset: DatasetInfo::of(dataset),
            config,
            settings: serde_json::Value::Null,
        }
    }
}
