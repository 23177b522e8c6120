//! File-based, append-only run store.
//!
//! A store is one directory:
//!
//! ```text
//! store/
//!   log.jsonl              one record per line, appended and synced
//!   datasets/<id>.jsonl    registered datasets in the dataset format
//! ```
//!
//! The in-memory index is rebuilt from the log on open. A trailing line
//! without a newline is a write that was never acknowledged and is cut off;
//! any other unreadable line is corruption and refuses the open.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisProfile, EmbeddingSource};
use crate::forge::{load_dataset, serialize_dataset, Dataset, DatasetError, DatasetKind};
use crate::gateway::{BackendDescriptor, PredictionSet};
use crate::metrics::MetricReport;

pub const LOG_FILE: &str = "log.jsonl";
pub const DATASET_DIR: &str = "datasets";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line} is corrupt: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("record already written: {0}")]
    Duplicate(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seconds since the Unix epoch.
pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Complete,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Complete => "complete",
            RunStatus::Failed => "failed",
        }
    }

    pub fn is_final(self) -> bool {
        matches!(self, RunStatus::Complete | RunStatus::Failed)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// When similarity and attention profiles are computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileMode {
    /// For every prediction while the run executes.
    Eager,
    /// Only when a sentence view asks for them.
    #[default]
    Lazy,
}

impl FromStr for ProfileMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eager" => Ok(ProfileMode::Eager),
            "lazy" => Ok(ProfileMode::Lazy),
            other => Err(format!("unknown profile mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dataset_id: String,
    pub kind: DatasetKind,
    pub content_hash: String,
    pub snapshot_id: String,
    pub template_hash: String,
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    /// Path relative to the store directory.
    pub path: String,
    pub registered_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunDataset {
    pub dataset_id: String,
    pub kind: DatasetKind,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub endpoint: String,
    pub datasets: Vec<RunDataset>,
    pub layer: usize,
    pub k: usize,
    pub profiles: ProfileMode,
    pub source: EmbeddingSource,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusEvent {
    pub status: RunStatus,
    pub at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub dataset_id: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogRecord {
    Dataset(DatasetEntry),
    Run(RunRecord),
    Backend { run_id: String, backend: BackendDescriptor },
    Status { run_id: String, event: StatusEvent },
    Predictions { run_id: String, set: PredictionSet },
    Profile { run_id: String, profile: AnalysisProfile },
    Report { run_id: String, report: StoredReport },
}

#[derive(Default)]
struct Index {
    datasets: Vec<DatasetEntry>,
    runs: Vec<RunRecord>,
    backends: HashMap<String, BackendDescriptor>,
    statuses: HashMap<String, Vec<StatusEvent>>,
    predictions: HashMap<String, HashMap<String, PredictionSet>>,
    profiles: HashMap<String, HashMap<String, Vec<AnalysisProfile>>>,
    reports: HashMap<String, Vec<StoredReport>>,
}

impl Index {
    fn has_run(&self, run_id: &str) -> bool {
        self.runs.iter().any(|r| r.run_id == run_id)
    }

    fn has_dataset(&self, dataset_id: &str) -> bool {
        self.datasets.iter().any(|d| d.dataset_id == dataset_id)
    }

    fn has_prediction(&self, run_id: &str, sentence_id: &str) -> bool {
        self.predictions.get(run_id).is_some_and(|m| m.contains_key(sentence_id))
    }

    fn has_profile(&self, run_id: &str, profile: &AnalysisProfile) -> bool {
        let existing = self.profiles.get(run_id).and_then(|m| m.get(&profile.sentence_id));
        existing.is_some_and(|v| v.iter().any(|p| same_profile_slot(p, profile)))
    }

    fn has_report(&self, run_id: &str, dataset_id: &str) -> bool {
        self.reports.get(run_id).is_some_and(|v| v.iter().any(|r| r.dataset_id == dataset_id))
    }

    fn apply(&mut self, record: LogRecord) {
        match record {
            LogRecord::Dataset(d) => self.datasets.push(d),
            LogRecord::Run(r) => self.runs.push(r),
            LogRecord::Backend { run_id, backend } => {
                self.backends.insert(run_id, backend);
            }
            LogRecord::Status { run_id, event } => self.statuses.entry(run_id).or_default().push(event),
            LogRecord::Predictions { run_id, set } => {
                self.predictions.entry(run_id).or_default().insert(set.sentence_id.clone(), set);
            }
            LogRecord::Profile { run_id, profile } => {
                let list = self.profiles.entry(run_id).or_default().entry(profile.sentence_id.clone()).or_default();
                list.push(profile);
                list.sort_by_key(|p| p.prediction_rank);
            }
            LogRecord::Report { run_id, report } => self.reports.entry(run_id).or_default().push(report),
        }
    }
}

/// Rejects a record that would break the index invariants, given the
/// committed index and the records staged before it in the same batch.
fn check(committed: &Index, staged: &Index, record: &LogRecord) -> Result<(), StoreError> {
    let either = |f: &dyn Fn(&Index) -> bool| f(committed) || f(staged);
    let known = |run_id: &str| {
        if either(&|i| i.has_run(run_id)) {
            Ok(())
        } else {
            Err(StoreError::UnknownRun(run_id.to_string()))
        }
    };
    let duplicate = |what: String| Err(StoreError::Duplicate(what));
    match record {
        LogRecord::Dataset(d) if either(&|i| i.has_dataset(&d.dataset_id)) => duplicate(format!("dataset {}", d.dataset_id)),
        LogRecord::Dataset(_) => Ok(()),
        LogRecord::Run(r) if either(&|i| i.has_run(&r.run_id)) => duplicate(format!("run {}", r.run_id)),
        LogRecord::Run(_) => Ok(()),
        LogRecord::Backend { run_id, .. } => {
            known(run_id)?;
            if either(&|i| i.backends.contains_key(run_id)) {
                return duplicate(format!("backend of {run_id}"));
            }
            Ok(())
        }
        LogRecord::Status { run_id, .. } => known(run_id),
        LogRecord::Predictions { run_id, set } => {
            known(run_id)?;
            if either(&|i| i.has_prediction(run_id, &set.sentence_id)) {
                return duplicate(format!("predictions {run_id}/{}", set.sentence_id));
            }
            Ok(())
        }
        LogRecord::Profile { run_id, profile } => {
            known(run_id)?;
            if either(&|i| i.has_profile(run_id, profile)) {
                return duplicate(format!("profile {run_id}/{} rank {}", profile.sentence_id, profile.prediction_rank));
            }
            Ok(())
        }
        LogRecord::Report { run_id, report } => {
            known(run_id)?;
            if either(&|i| i.has_report(run_id, &report.dataset_id)) {
                return duplicate(format!("report {run_id}/{}", report.dataset_id));
            }
            Ok(())
        }
    }
}

fn same_profile_slot(a: &AnalysisProfile, b: &AnalysisProfile) -> bool {
    a.prediction_rank == b.prediction_rank && a.layer == b.layer && a.source == b.source
}

pub struct RunStore {
    dir: PathBuf,
    writer: Mutex<File>,
    /// Held from run id allocation until the run record is appended.
    run_ids: Mutex<()>,
    index: RwLock<Index>,
}

impl fmt::Debug for RunStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunStore").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl RunStore {
    /// Opens or creates the store in `dir`, replaying its log.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir.join(DATASET_DIR)).map_err(io(dir))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;

        let mut index = Index::default();
        let mut reader = BufReader::new(&file);
        let mut offset = 0u64;
        let mut line_no = 0;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io(&path))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                log::warn!("{}: dropping unacknowledged partial record at line {line_no}", path.display());
                file.set_len(offset).map_err(io(&path))?;
                file.sync_data().map_err(io(&path))?;
                break;
            }
            offset += n as u64;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| StoreError::Corrupt {
                path: path.clone(),
                line: line_no,
                message,
            };
            let record: LogRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            check(&index, &Index::default(), &record).map_err(|e| corrupt(e.to_string()))?;
            index.apply(record);
        }

        Ok(Self {
            dir: dir.to_path_buf(),
            writer: Mutex::new(file),
            run_ids: Mutex::new(()),
            index: RwLock::new(index),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends records as one synced write, then indexes them. Either all
    /// records are acknowledged or none is.
    fn append(&self, records: Vec<LogRecord>) -> Result<(), StoreError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut file = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        {
            let index = self.index.read().unwrap_or_else(|e| e.into_inner());
            let mut staged = Index::default();
            for r in &records {
                check(&index, &staged, r)?;
                staged.apply(r.clone());
            }
        }
        let mut buf = String::new();
        for r in &records {
            buf.push_str(&serde_json::to_string(r).expect("log records always serialize"));
            buf.push('\n');
        }
        let path = self.dir.join(LOG_FILE);
        file.write_all(buf.as_bytes()).map_err(io(&path))?;
        file.sync_data().map_err(io(&path))?;
        let mut index = self.index.write().unwrap_or_else(|e| e.into_inner());
        for r in records {
            index.apply(r);
        }
        Ok(())
    }

    /// Copies `dataset` into the store. Registering the same content twice
    /// returns the existing entry.
    pub fn register_dataset(&self, dataset: &Dataset) -> Result<DatasetEntry, StoreError> {
        let dataset_id = dataset.dataset_id();
        if let Some(existing) = self.dataset(&dataset_id) {
            return Ok(existing);
        }
        let rel = format!("{DATASET_DIR}/{dataset_id}.jsonl");
        let path = self.dir.join(&rel);
        let tmp = path.with_extension("jsonl.tmp");
        let text = serialize_dataset(dataset);
        {
            let mut f = File::create(&tmp).map_err(io(&tmp))?;
            f.write_all(text.as_bytes()).map_err(io(&tmp))?;
            f.sync_all().map_err(io(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io(&path))?;
        let manifest = dataset.manifest();
        let entry = DatasetEntry {
            dataset_id,
            kind: dataset.kind(),
            content_hash: dataset.content_hash(),
            snapshot_id: manifest.snapshot_id.clone(),
            template_hash: manifest.template_hash.clone(),
            total: dataset.len(),
            counts: manifest.counts.iter().map(|(s, n)| (s.as_str().to_string(), *n)).collect(),
            path: rel,
            registered_at: now(),
        };
        match self.append(vec![LogRecord::Dataset(entry.clone())]) {
            Ok(()) => Ok(entry),
            // A concurrent registration of the same content won the race.
            Err(StoreError::Duplicate(_)) => self.dataset(&entry.dataset_id).ok_or(StoreError::UnknownDataset(entry.dataset_id)),
            Err(e) => Err(e),
        }
    }

    pub fn datasets(&self) -> Vec<DatasetEntry> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).datasets.clone()
    }

    pub fn dataset(&self, dataset_id: &str) -> Option<DatasetEntry> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index.datasets.iter().find(|d| d.dataset_id == dataset_id).cloned()
    }

    pub fn load_dataset(&self, dataset_id: &str) -> Result<Dataset, StoreError> {
        let entry = self.dataset(dataset_id).ok_or_else(|| StoreError::UnknownDataset(dataset_id.to_string()))?;
        Ok(load_dataset(&self.dir.join(entry.path))?)
    }

    /// Creates a run with the next sequential id and a `pending` status.
    pub fn create_run(
        &self,
        endpoint: &str,
        datasets: Vec<RunDataset>,
        layer: usize,
        k: usize,
        profiles: ProfileMode,
        source: EmbeddingSource,
    ) -> Result<RunRecord, StoreError> {
        let _allocating = self.run_ids.lock().unwrap_or_else(|e| e.into_inner());
        let run_id = format!("run-{:04}", self.index.read().unwrap_or_else(|e| e.into_inner()).runs.len() + 1);
        let created_at = now();
        let run = RunRecord {
            run_id: run_id.clone(),
            endpoint: endpoint.to_string(),
            datasets,
            layer,
            k,
            profiles,
            source,
            created_at,
        };
        self.append(vec![
            LogRecord::Run(run.clone()),
            LogRecord::Status {
                run_id,
                event: StatusEvent {
                    status: RunStatus::Pending,
                    at: created_at,
                    cause: None,
                },
            },
        ])?;
        Ok(run)
    }

    pub fn set_backend(&self, run_id: &str, backend: BackendDescriptor) -> Result<(), StoreError> {
        self.append(vec![LogRecord::Backend {
            run_id: run_id.to_string(),
            backend,
        }])
    }

    pub fn set_status(&self, run_id: &str, status: RunStatus, cause: Option<String>) -> Result<(), StoreError> {
        self.append(vec![LogRecord::Status {
            run_id: run_id.to_string(),
            event: StatusEvent { status, at: now(), cause },
        }])
    }

    pub fn append_predictions(&self, run_id: &str, sets: Vec<PredictionSet>) -> Result<(), StoreError> {
        self.append(
            sets.into_iter()
                .map(|set| LogRecord::Predictions {
                    run_id: run_id.to_string(),
                    set,
                })
                .collect(),
        )
    }

    pub fn append_profiles(&self, run_id: &str, profiles: Vec<AnalysisProfile>) -> Result<(), StoreError> {
        self.append(
            profiles
                .into_iter()
                .map(|profile| LogRecord::Profile {
                    run_id: run_id.to_string(),
                    profile,
                })
                .collect(),
        )
    }

    pub fn append_report(&self, run_id: &str, dataset_id: &str, report: MetricReport) -> Result<(), StoreError> {
        self.append(vec![LogRecord::Report {
            run_id: run_id.to_string(),
            report: StoredReport {
                dataset_id: dataset_id.to_string(),
                report,
            },
        }])
    }

    /// Runs in creation order.
    pub fn runs(&self) -> Vec<RunRecord> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).runs.clone()
    }

    pub fn run(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index
            .runs
            .iter()
            .find(|r| r.run_id == run_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownRun(run_id.to_string()))
    }

    pub fn backend(&self, run_id: &str) -> Option<BackendDescriptor> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).backends.get(run_id).cloned()
    }

    pub fn status_history(&self, run_id: &str) -> Vec<StatusEvent> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index.statuses.get(run_id).cloned().unwrap_or_default()
    }

    pub fn status(&self, run_id: &str) -> Option<StatusEvent> {
        self.status_history(run_id).pop()
    }

    pub fn prediction(&self, run_id: &str, sentence_id: &str) -> Option<PredictionSet> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index.predictions.get(run_id)?.get(sentence_id).cloned()
    }

    pub fn predictions(&self, run_id: &str) -> HashMap<String, PredictionSet> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index.predictions.get(run_id).cloned().unwrap_or_default()
    }

    pub fn prediction_count(&self, run_id: &str) -> usize {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index.predictions.get(run_id).map_or(0, HashMap::len)
    }

    /// Stored profiles of a sentence, by rank.
    pub fn profiles(&self, run_id: &str, sentence_id: &str) -> Vec<AnalysisProfile> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index
            .profiles
            .get(run_id)
            .and_then(|m| m.get(sentence_id))
            .cloned()
            .unwrap_or_default()
    }

    pub fn reports(&self, run_id: &str) -> Vec<StoredReport> {
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        index.reports.get(run_id).cloned().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{InconsistentPair, Subset};
    use crate::gateway::Prediction;

    fn dataset() -> Dataset {
        Dataset::from_pairs(
            "snap",
            "tmpl",
            vec![InconsistentPair {
                pair_id: "p1".into(),
                subset: Subset::Negation,
                sentence_a: "A is not [MASK].".into(),
                sentence_b: "A is [MASK].".into(),
                template_id: "t".into(),
            }],
        )
    }

    fn set(id: &str) -> PredictionSet {
        PredictionSet {
            sentence_id: id.into(),
            backend_id: "mock".into(),
            k: 1,
            mask_word_index: 3,
            predictions: vec![Prediction { word: "x".into(), prob: 0.5 }],
        }
    }

    fn run(store: &RunStore) -> RunRecord {
        store
            .create_run("builtin:mock", vec![], 11, 10, ProfileMode::Lazy, EmbeddingSource::Substituted)
            .unwrap()
    }

    #[test]
    fn empty_store_lists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert!(store.runs().is_empty());
        assert!(store.datasets().is_empty());
        assert!(matches!(store.run("run-0001"), Err(StoreError::UnknownRun(_))));
    }

    #[test]
    fn records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = RunStore::open(dir.path()).unwrap();
            let entry = store.register_dataset(&dataset()).unwrap();
            assert_eq!(store.register_dataset(&dataset()).unwrap(), entry);
            let r = run(&store);
            assert_eq!(r.run_id, "run-0001");
            assert_eq!(run(&store).run_id, "run-0002");
            store.append_predictions("run-0001", vec![set("p1.a"), set("p1.b")]).unwrap();
            store.set_status("run-0001", RunStatus::Complete, None).unwrap();
            assert!(matches!(store.append_predictions("run-0001", vec![set("p1.a")]), Err(StoreError::Duplicate(_))));
            assert!(matches!(store.append_predictions("run-0009", vec![set("x")]), Err(StoreError::UnknownRun(_))));
        }
        let store = RunStore::open(dir.path()).unwrap();
        assert_eq!(store.runs().len(), 2);
        assert_eq!(store.prediction("run-0001", "p1.b"), Some(set("p1.b")));
        assert_eq!(store.status("run-0001").unwrap().status, RunStatus::Complete);
        assert_eq!(store.status("run-0002").unwrap().status, RunStatus::Pending);
        let id = dataset().dataset_id();
        assert_eq!(store.load_dataset(&id).unwrap(), dataset());
    }

    #[test]
    fn torn_tail_is_dropped_and_corruption_refused() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = RunStore::open(dir.path()).unwrap();
            run(&store);
            store.append_predictions("run-0001", vec![set("a")]).unwrap();
        }
        let log = dir.path().join(LOG_FILE);
        let intact = fs::read_to_string(&log).unwrap();
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"record\":\"predictions\",\"run_id\":\"run-0001\",\"set\":{\"sent").unwrap();
        drop(f);
        {
            let store = RunStore::open(dir.path()).unwrap();
            assert_eq!(store.prediction_count("run-0001"), 1);
            assert_eq!(fs::read_to_string(&log).unwrap(), intact);
            store.append_predictions("run-0001", vec![set("b")]).unwrap();
        }
        assert_eq!(RunStore::open(dir.path()).unwrap().prediction_count("run-0001"), 2);

        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"not json\n").unwrap();
        drop(f);
        assert!(matches!(RunStore::open(dir.path()), Err(StoreError::Corrupt { line: 5, .. })));
    }
}
