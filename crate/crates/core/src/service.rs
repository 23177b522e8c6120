//! Run orchestration on top of the [`RunStore`].
//!
//! `start_run` checks the backend synchronously and then executes the run on
//! a worker thread: predictions for every sentence (in parallel, written in
//! dataset order), optional eager profiles, then one report per dataset.
//! Readers see persisted state plus live progress counters and never wait
//! on backend calls.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{profile_all, AnalysisError, AnalysisProfile, EmbeddingSource};
use crate::forge::{parse_dataset, serialize_dataset, Dataset, DatasetError, DatasetKind, ProbeSentence, Subset};
use crate::gateway::{BackendDescriptor, Gateway, GatewayOptions, PredictionSet, Transport};
use crate::metrics::{build_report, forbidden_flags, overlap_partner_ranks, MetricError, MetricReport, REPORT_KS};
use crate::store::{DatasetEntry, ProfileMode, RunDataset, RunRecord, RunStatus, RunStore, StoreError};

/// Layer used for embeddings unless a run says otherwise.
pub const DEFAULT_LAYER: usize = 11;
/// Sentences per page of `list_sentences`.
pub const PAGE_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid run parameters: {0}")]
    InvalidParams(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{run_id}` has no sentence `{sentence_id}`")]
    UnknownSentence { run_id: String, sentence_id: String },
    #[error("run `{run_id}` has no report for `{dataset}`")]
    UnknownReport { run_id: String, dataset: String },
    #[error("run `{run_id}` has no predictions for `{sentence_id}` yet")]
    NotReady { run_id: String, sentence_id: String },
    #[error("backend of run `{0}` is not attached")]
    BackendUnavailable(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunParams {
    pub layer: usize,
    pub k: usize,
    pub profiles: ProfileMode,
    pub source: EmbeddingSource,
    pub max_in_flight: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            layer: DEFAULT_LAYER,
            k: REPORT_KS[REPORT_KS.len() - 1],
            profiles: ProfileMode::Lazy,
            source: EmbeddingSource::Substituted,
            max_in_flight: GatewayOptions::default().max_in_flight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressView {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub backend: Option<BackendDescriptor>,
    pub endpoint: String,
    pub datasets: Vec<RunDataset>,
    pub layer: usize,
    pub k: usize,
    pub profiles: ProfileMode,
    pub source: EmbeddingSource,
    pub status: RunStatus,
    pub cause: Option<String>,
    pub progress: ProgressView,
    pub reports: Vec<String>,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub dataset_id: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRef {
    pub sentence_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub rank: usize,
    pub word: String,
    pub prob: f64,
    /// Overlaps with the paired sentence or is forbidden.
    pub flagged: bool,
    /// Rank of the same word among the paired sentence's predictions.
    pub partner_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceView {
    pub run_id: String,
    pub backend_id: String,
    pub dataset_id: String,
    pub dataset: DatasetKind,
    pub sentence_id: String,
    pub subset: Subset,
    pub text: String,
    pub k: usize,
    pub paired_sentence: Option<SentenceRef>,
    pub forbidden: Option<Vec<String>>,
    pub predictions: Vec<ViewPrediction>,
    pub profile_mode: ProfileMode,
    pub profiles: Vec<AnalysisProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceSummary {
    pub sentence_id: String,
    pub dataset_id: String,
    pub subset: Subset,
    pub text: String,
    pub paired_sentence_id: Option<String>,
    pub top_prediction: Option<String>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePage {
    pub run_id: String,
    pub subset: Option<Subset>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub items: Vec<SentenceSummary>,
}

/// One probe sentence of a dataset with what its view needs.
#[derive(Debug, Clone)]
struct Item {
    sentence_id: String,
    subset: Subset,
    text: String,
    partner: Option<SentenceRef>,
    forbidden: Option<Vec<String>>,
}

#[derive(Debug)]
struct LoadedDataset {
    dataset: Dataset,
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
}

impl LoadedDataset {
    fn new(dataset: Dataset) -> Self {
        let mut items = Vec::new();
        match &dataset {
            Dataset::Inconsistent { pairs, .. } => {
                for p in pairs {
                    let (a, b) = (p.sentence_id_a(), p.sentence_id_b());
                    items.push(Item {
                        sentence_id: a.clone(),
                        subset: p.subset,
                        text: p.sentence_a.clone(),
                        partner: Some(SentenceRef { sentence_id: b.clone(), text: p.sentence_b.clone() }),
                        forbidden: None,
                    });
                    items.push(Item {
                        sentence_id: b,
                        subset: p.subset,
                        text: p.sentence_b.clone(),
                        partner: Some(SentenceRef { sentence_id: a, text: p.sentence_a.clone() }),
                        forbidden: None,
                    });
                }
            }
            Dataset::Semantic { sentences, .. } => {
                for s in sentences {
                    items.push(Item {
                        sentence_id: s.sentence_id.clone(),
                        subset: s.subset,
                        text: s.text.clone(),
                        partner: None,
                        forbidden: Some(s.forbidden.clone()),
                    });
                }
            }
        }
        let by_id = items.iter().enumerate().map(|(i, it)| (it.sentence_id.clone(), i)).collect();
        Self { dataset, items, by_id }
    }
}

#[derive(Default)]
struct Progress {
    done: AtomicUsize,
}

#[derive(Default)]
struct LiveRun {
    progress: Arc<Progress>,
    gateway: Option<Arc<Gateway>>,
    handle: Option<JoinHandle<()>>,
}

pub struct ProbeService {
    store: Arc<RunStore>,
    live: Mutex<HashMap<String, LiveRun>>,
    datasets: Mutex<HashMap<String, Arc<LoadedDataset>>>,
}

impl ProbeService {
    /// Opens the store in `dir`. Runs left unfinished by an earlier process
    /// are marked failed.
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        Self::new(Arc::new(RunStore::open(dir)?))
    }

    pub fn new(store: Arc<RunStore>) -> Result<Self, ServiceError> {
        for run in store.runs() {
            if store.status(&run.run_id).is_some_and(|s| !s.status.is_final()) {
                log::warn!("{} was interrupted; marking it failed", run.run_id);
                store.set_status(&run.run_id, RunStatus::Failed, Some("interrupted before completion".into()))?;
            }
        }
        Ok(Self {
            store,
            live: Mutex::new(HashMap::new()),
            datasets: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &Arc<RunStore> {
        &self.store
    }

    /// Validates and stores a dataset; identical content maps to one entry.
    pub fn register_dataset(&self, dataset: &Dataset) -> Result<DatasetEntry, ServiceError> {
        let text = serialize_dataset(dataset);
        let parsed = parse_dataset(&text)?;
        Ok(self.store.register_dataset(&parsed)?)
    }

    pub fn list_datasets(&self) -> Vec<DatasetEntry> {
        self.store.datasets()
    }

    fn loaded(&self, dataset_id: &str) -> Result<Arc<LoadedDataset>, ServiceError> {
        if let Some(d) = self.datasets.lock().unwrap_or_else(|e| e.into_inner()).get(dataset_id) {
            return Ok(Arc::clone(d));
        }
        let loaded = Arc::new(LoadedDataset::new(self.store.load_dataset(dataset_id)?));
        let mut cache = self.datasets.lock().unwrap_or_else(|e| e.into_inner());
        Ok(Arc::clone(cache.entry(dataset_id.to_string()).or_insert(loaded)))
    }

    /// Creates a run and starts it. Returns the run id even when the backend
    /// cannot be reached; that run is immediately `failed` with the cause.
    pub fn start_run(
        &self,
        transport: Arc<dyn Transport>,
        endpoint: &str,
        dataset_ids: &[String],
        params: RunParams,
    ) -> Result<String, ServiceError> {
        let min_k = REPORT_KS[REPORT_KS.len() - 1];
        if params.k < min_k {
            return Err(ServiceError::InvalidParams(format!("k must be at least {min_k}, got {}", params.k)));
        }
        if params.layer == 0 {
            return Err(ServiceError::InvalidParams("layers are numbered from 1".into()));
        }
        if dataset_ids.is_empty() {
            return Err(ServiceError::InvalidParams("no datasets given".into()));
        }
        let mut loaded = Vec::new();
        let mut seen = HashSet::new();
        let mut run_datasets = Vec::new();
        for id in dataset_ids {
            let entry = self.store.dataset(id).ok_or_else(|| StoreError::UnknownDataset(id.clone()))?;
            let d = self.loaded(id)?;
            if let Some(dup) = d.items.iter().find(|it| !seen.insert(it.sentence_id.clone())) {
                return Err(ServiceError::InvalidParams(format!(
                    "sentence id `{}` occurs in more than one dataset",
                    dup.sentence_id
                )));
            }
            run_datasets.push(RunDataset {
                dataset_id: entry.dataset_id,
                kind: entry.kind,
                content_hash: entry.content_hash,
            });
            loaded.push(d);
        }

        let run = self
            .store
            .create_run(endpoint, run_datasets, params.layer, params.k, params.profiles, params.source)?;
        let run_id = run.run_id.clone();

        let options = GatewayOptions {
            max_in_flight: params.max_in_flight,
            cache: true,
        };
        let gateway = match Gateway::connect(transport, endpoint, options) {
            Ok(g) => g,
            Err(e) => {
                self.store.set_status(&run_id, RunStatus::Failed, Some(format!("backend info failed: {e}")))?;
                return Ok(run_id);
            }
        };
        self.store.set_backend(&run_id, gateway.descriptor().clone())?;
        if params.layer > gateway.descriptor().num_layers {
            let cause = format!("layer {} exceeds the backend's {} layers", params.layer, gateway.descriptor().num_layers);
            self.store.set_status(&run_id, RunStatus::Failed, Some(cause))?;
            return Ok(run_id);
        }

        let gateway = Arc::new(gateway);
        let progress = Arc::new(Progress::default());
        let worker = Worker {
            store: Arc::clone(&self.store),
            gateway: Arc::clone(&gateway),
            progress: Arc::clone(&progress),
            run,
            datasets: loaded,
        };
        let handle = std::thread::Builder::new()
            .name(format!("probe-{run_id}"))
            .spawn(move || worker.run())
            .map_err(|e| StoreError::Io { path: self.store.dir().to_path_buf(), source: e })?;
        self.live.lock().unwrap_or_else(|e| e.into_inner()).insert(
            run_id.clone(),
            LiveRun {
                progress,
                gateway: Some(gateway),
                handle: Some(handle),
            },
        );
        Ok(run_id)
    }

    /// Blocks until the run's worker finishes and returns the final view.
    pub fn wait(&self, run_id: &str) -> Result<RunView, ServiceError> {
        let handle = self
            .live
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get_mut(run_id)
            .and_then(|l| l.handle.take());
        if let Some(handle) = handle {
            if handle.join().is_err() {
                self.store.set_status(run_id, RunStatus::Failed, Some("worker panicked".into()))?;
            }
        }
        self.get_run(run_id)
    }

    /// Connects a backend for on-demand profiles of an existing run. The
    /// backend must report the identity recorded for the run.
    pub fn attach_backend(&self, run_id: &str, transport: Arc<dyn Transport>, endpoint: &str) -> Result<(), ServiceError> {
        self.store.run(run_id)?;
        let recorded = self.store.backend(run_id).ok_or_else(|| ServiceError::BackendUnavailable(run_id.to_string()))?;
        let gateway = Gateway::connect(transport, endpoint, GatewayOptions::default())
            .map_err(|e| AnalysisError::Gateway(e))?;
        if gateway.descriptor().backend_id != recorded.backend_id {
            return Err(ServiceError::InvalidParams(format!(
                "backend `{}` does not match run backend `{}`",
                gateway.descriptor().backend_id,
                recorded.backend_id
            )));
        }
        let mut live = self.live.lock().unwrap_or_else(|e| e.into_inner());
        live.entry(run_id.to_string()).or_default().gateway = Some(Arc::new(gateway));
        Ok(())
    }

    pub fn list_runs(&self) -> Result<Vec<RunView>, ServiceError> {
        self.store.runs().iter().map(|r| self.view_of(r)).collect()
    }

    pub fn get_run(&self, run_id: &str) -> Result<RunView, ServiceError> {
        let run = self.store.run(run_id).map_err(|_| ServiceError::UnknownRun(run_id.to_string()))?;
        self.view_of(&run)
    }

    fn view_of(&self, run: &RunRecord) -> Result<RunView, ServiceError> {
        let history = self.store.status_history(&run.run_id);
        let last = history.last().cloned();
        let total = run
            .datasets
            .iter()
            .map(|d| {
                let n = self.store.dataset(&d.dataset_id).map_or(0, |e| e.total);
                match d.kind {
                    DatasetKind::Inconsistent => 2 * n,
                    DatasetKind::Semantic => n,
                }
            })
            .sum();
        let live_done = self
            .live
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&run.run_id)
            .map(|l| l.progress.done.load(Ordering::Relaxed));
        let done = live_done.unwrap_or(0).max(self.store.prediction_count(&run.run_id));
        Ok(RunView {
            run_id: run.run_id.clone(),
            backend: self.store.backend(&run.run_id),
            endpoint: run.endpoint.clone(),
            datasets: run.datasets.clone(),
            layer: run.layer,
            k: run.k,
            profiles: run.profiles,
            source: run.source,
            status: last.as_ref().map_or(RunStatus::Pending, |s| s.status),
            cause: last.as_ref().and_then(|s| s.cause.clone()),
            progress: ProgressView { done, total },
            reports: self.store.reports(&run.run_id).into_iter().map(|r| r.dataset_id).collect(),
            created_at: run.created_at,
            updated_at: last.map_or(run.created_at, |s| s.at),
        })
    }

    /// Report of a run for a dataset, named by id or by kind.
    pub fn get_report(&self, run_id: &str, dataset: &str) -> Result<RunReport, ServiceError> {
        let run = self.store.run(run_id).map_err(|_| ServiceError::UnknownRun(run_id.to_string()))?;
        let wanted = run
            .datasets
            .iter()
            .find(|d| d.dataset_id == dataset || d.kind.as_str() == dataset)
            .map(|d| d.dataset_id.clone());
        let stored = wanted.and_then(|id| self.store.reports(run_id).into_iter().find(|r| r.dataset_id == id));
        let stored = stored.ok_or_else(|| ServiceError::UnknownReport {
            run_id: run_id.to_string(),
            dataset: dataset.to_string(),
        })?;
        Ok(RunReport {
            run_id: run_id.to_string(),
            dataset_id: stored.dataset_id,
            report: stored.report,
        })
    }

    fn find_item(&self, run: &RunRecord, sentence_id: &str) -> Result<(Arc<LoadedDataset>, String, usize), ServiceError> {
        for d in &run.datasets {
            let loaded = self.loaded(&d.dataset_id)?;
            if let Some(&i) = loaded.by_id.get(sentence_id) {
                return Ok((loaded, d.dataset_id.clone(), i));
            }
        }
        Err(ServiceError::UnknownSentence {
            run_id: run.run_id.clone(),
            sentence_id: sentence_id.to_string(),
        })
    }

    fn flags(&self, run: &RunRecord, item: &Item, own: &PredictionSet) -> Result<Vec<(bool, Option<usize>)>, ServiceError> {
        let k = own.predictions.len().min(run.k);
        if let Some(partner) = &item.partner {
            let other = self.store.prediction(&run.run_id, &partner.sentence_id).ok_or_else(|| ServiceError::NotReady {
                run_id: run.run_id.clone(),
                sentence_id: partner.sentence_id.clone(),
            })?;
            let k = k.min(other.predictions.len());
            let ranks = overlap_partner_ranks(own, &other, k)?;
            Ok(ranks.into_iter().map(|r| (r.is_some(), r)).collect())
        } else {
            let forbidden = item.forbidden.as_deref().unwrap_or_default();
            Ok(forbidden_flags(own, forbidden, k)?.into_iter().map(|f| (f, None)).collect())
        }
    }

    pub fn get_sentence_view(&self, run_id: &str, sentence_id: &str) -> Result<SentenceView, ServiceError> {
        let run = self.store.run(run_id).map_err(|_| ServiceError::UnknownRun(run_id.to_string()))?;
        let (loaded, dataset_id, i) = self.find_item(&run, sentence_id)?;
        let item = &loaded.items[i];
        let own = self.store.prediction(run_id, sentence_id).ok_or_else(|| ServiceError::NotReady {
            run_id: run_id.to_string(),
            sentence_id: sentence_id.to_string(),
        })?;
        let flags = self.flags(&run, item, &own)?;
        let predictions = own
            .predictions
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let (flagged, partner_rank) = flags.get(r).copied().unwrap_or((false, None));
                ViewPrediction {
                    rank: r + 1,
                    word: p.word.clone(),
                    prob: p.prob,
                    flagged,
                    partner_rank,
                }
            })
            .collect();
        Ok(SentenceView {
            run_id: run_id.to_string(),
            backend_id: own.backend_id.clone(),
            dataset_id,
            dataset: loaded.dataset.kind(),
            sentence_id: sentence_id.to_string(),
            subset: item.subset,
            text: item.text.clone(),
            k: run.k,
            paired_sentence: item.partner.clone(),
            forbidden: item.forbidden.clone(),
            predictions,
            profile_mode: run.profiles,
            profiles: self.store.profiles(run_id, sentence_id),
        })
    }

    /// Returns stored profiles for every prediction of the sentence,
    /// computing and storing the missing ones through the run's backend.
    pub fn ensure_profiles(&self, run_id: &str, sentence_id: &str) -> Result<Vec<AnalysisProfile>, ServiceError> {
        let run = self.store.run(run_id).map_err(|_| ServiceError::UnknownRun(run_id.to_string()))?;
        let (loaded, _, i) = self.find_item(&run, sentence_id)?;
        let own = self.store.prediction(run_id, sentence_id).ok_or_else(|| ServiceError::NotReady {
            run_id: run_id.to_string(),
            sentence_id: sentence_id.to_string(),
        })?;
        let stored = self.store.profiles(run_id, sentence_id);
        if stored.len() >= own.predictions.len() {
            return Ok(stored);
        }
        let gateway = self
            .live
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(run_id)
            .and_then(|l| l.gateway.clone())
            .ok_or_else(|| ServiceError::BackendUnavailable(run_id.to_string()))?;
        let item = &loaded.items[i];
        let sentence = ProbeSentence::new(item.sentence_id.clone(), item.text.clone());
        let missing: Vec<AnalysisProfile> = profile_all(&gateway, &sentence, &own, run.layer, run.source)?
            .into_iter()
            .filter(|p| !stored.iter().any(|s| s.prediction_rank == p.prediction_rank))
            .collect();
        match self.store.append_profiles(run_id, missing) {
            // A concurrent request stored the same profiles first.
            Ok(()) | Err(StoreError::Duplicate(_)) => Ok(self.store.profiles(run_id, sentence_id)),
            Err(e) => Err(e.into()),
        }
    }

    /// One page (1-based) of the run's sentences in dataset order.
    pub fn list_sentences(
        &self,
        run_id: &str,
        subset: Option<Subset>,
        page: usize,
        page_size: usize,
    ) -> Result<SentencePage, ServiceError> {
        if page == 0 || page_size == 0 {
            return Err(ServiceError::InvalidParams("page and page size start at 1".into()));
        }
        let run = self.store.run(run_id).map_err(|_| ServiceError::UnknownRun(run_id.to_string()))?;
        let mut all = Vec::new();
        for d in &run.datasets {
            let loaded = self.loaded(&d.dataset_id)?;
            for it in loaded.items.iter().filter(|it| subset.is_none_or(|s| s == it.subset)) {
                all.push((Arc::clone(&loaded), d.dataset_id.clone(), it.sentence_id.clone()));
            }
        }
        let total = all.len();
        let mut items = Vec::new();
        for (loaded, dataset_id, sid) in all.into_iter().skip((page - 1) * page_size).take(page_size) {
            let item = &loaded.items[loaded.by_id[&sid]];
            let own = self.store.prediction(run_id, &sid);
            let flagged = match &own {
                Some(own) => self.flags(&run, item, own).map(|f| f.iter().any(|(x, _)| *x)).unwrap_or(false),
                None => false,
            };
            items.push(SentenceSummary {
                sentence_id: sid,
                dataset_id,
                subset: item.subset,
                text: item.text.clone(),
                paired_sentence_id: item.partner.as_ref().map(|p| p.sentence_id.clone()),
                top_prediction: own.and_then(|o| o.predictions.first().map(|p| p.word.clone())),
                flagged,
            });
        }
        Ok(SentencePage {
            run_id: run_id.to_string(),
            subset,
            page,
            page_size,
            total,
            items,
        })
    }
}

struct Worker {
    store: Arc<RunStore>,
    gateway: Arc<Gateway>,
    progress: Arc<Progress>,
    run: RunRecord,
    datasets: Vec<Arc<LoadedDataset>>,
}

impl Worker {
    fn run(self) {
        let run_id = self.run.run_id.clone();
        let outcome = self.execute();
        let (status, cause) = match outcome {
            Ok(()) => (RunStatus::Complete, None),
            Err(e) => {
                log::error!("{run_id} failed: {e}");
                (RunStatus::Failed, Some(e))
            }
        };
        if let Err(e) = self.store.set_status(&run_id, status, cause) {
            log::error!("{run_id}: cannot record final status: {e}");
        }
    }

    fn execute(&self) -> Result<(), String> {
        let run_id = &self.run.run_id;
        self.store.set_status(run_id, RunStatus::Running, None).map_err(|e| e.to_string())?;
        let backend_id = self.gateway.descriptor().backend_id.clone();
        for (loaded, meta) in self.datasets.iter().zip(&self.run.datasets) {
            let sentences = loaded.dataset.probe_sentences();
            log::info!("{run_id}: predicting {} sentences of {}", sentences.len(), meta.dataset_id);
            let sets = sentences
                .par_iter()
                .map(|s| {
                    let r = self.gateway.predict_masked(s, self.run.k);
                    self.progress.done.fetch_add(1, Ordering::Relaxed);
                    r.map_err(|e| format!("{}: {e}", s.sentence_id))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let by_id: HashMap<String, PredictionSet> = sets.iter().map(|s| (s.sentence_id.clone(), s.clone())).collect();
            self.store.append_predictions(run_id, sets.clone()).map_err(|e| e.to_string())?;

            if self.run.profiles == ProfileMode::Eager {
                let profiles = sentences
                    .par_iter()
                    .zip(&sets)
                    .map(|(s, set)| {
                        profile_all(&self.gateway, s, set, self.run.layer, self.run.source)
                            .map_err(|e| format!("{}: {e}", s.sentence_id))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                self.store
                    .append_profiles(run_id, profiles.into_iter().flatten().collect())
                    .map_err(|e| e.to_string())?;
            }

            let report = build_report(&loaded.dataset, &backend_id, &by_id).map_err(|e| e.to_string())?;
            self.store.append_report(run_id, &meta.dataset_id, report).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}
