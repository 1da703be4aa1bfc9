//! Job store, journal and worker pool.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use branch_core::dataset::PredictedPost;
use branch_core::model::{Disclosure, DisclosureId, DocumentContext, EstimateResult, RunConfig, StageTranscript};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use crate::backend::SharedBackend;
use crate::error::ServerError;
use crate::estimate::{estimate, UncertaintyRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

/// Body of `POST /api/estimate`: a post in the interchange format plus the
/// run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub disclosures: Vec<Disclosure>,
    #[serde(default)]
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyRequest>,
}

impl EstimateRequest {
    pub fn context(&self, fallback_id: &str) -> Result<DocumentContext, String> {
        let id = self.id.clone().unwrap_or_else(|| fallback_id.to_string());
        DocumentContext::new(id, self.text.clone(), self.domain.clone(), self.disclosures.clone())
            .map_err(|e| e.to_string())
    }

    /// Checks everything a worker would reject before any backend call.
    pub fn check(&self) -> Result<(), String> {
        if self.disclosures.is_empty() {
            return Err("at least one disclosure is required".into());
        }
        self.context("request")?;
        self.config.validate().map_err(|e| e.to_string())?;
        if let Some(u) = self.uncertainty {
            if u.runs < 2 {
                return Err("uncertainty needs at least 2 runs".into());
            }
        }
        Ok(())
    }

    pub fn restricted_to(&self, keep: &BTreeSet<DisclosureId>) -> EstimateRequest {
        EstimateRequest {
            disclosures: self
                .disclosures
                .iter()
                .filter(|d| keep.contains(&d.id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_job_id: Option<String>,
    pub request: EstimateRequest,
    /// Disclosure ids the run was given.
    pub included: Vec<DisclosureId>,
    /// Stages completed so far, in order.
    pub transcript: Vec<StageTranscript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<PredictedPost>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("unknown job `{0}`")]
    Unknown(String),
    #[error("job `{id}` cannot move from {from:?} to {to:?}")]
    Transition { id: String, from: JobState, to: JobState },
}

struct Inner {
    jobs: HashMap<String, Job>,
    next: u64,
    journal: Option<File>,
}

/// In-memory jobs with an optional append-only journal. All access goes
/// through one lock.
pub struct JobStore {
    inner: Mutex<Inner>,
}

impl JobStore {
    pub fn in_memory() -> Self {
        JobStore {
            inner: Mutex::new(Inner {
                jobs: HashMap::new(),
                next: 1,
                journal: None,
            }),
        }
    }

    /// Opens or creates a journal. Returns the store and the ids of jobs that
    /// had not finished, reset to queued.
    pub fn open(path: &Path) -> Result<(Self, Vec<String>), ServerError> {
        let mut jobs: HashMap<String, Job> = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| ServerError::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| ServerError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let job: Job = serde_json::from_str(&line).map_err(|e| ServerError::Journal {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                jobs.insert(job.job_id.clone(), job);
            }
        }
        let mut pending: Vec<String> = Vec::new();
        for job in jobs.values_mut() {
            if !job.state.is_terminal() {
                job.state = JobState::Queued;
                job.transcript.clear();
                pending.push(job.job_id.clone());
            }
        }
        pending.sort_by_key(|id| job_number(id));
        let next = jobs.keys().filter_map(|id| job_number(id)).max().unwrap_or(0) + 1;
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServerError::io(path, e))?;
        Ok((
            JobStore {
                inner: Mutex::new(Inner {
                    jobs,
                    next,
                    journal: Some(journal),
                }),
            },
            pending,
        ))
    }

    fn record(inner: &mut Inner, id: &str) {
        if let (Some(file), Some(job)) = (inner.journal.as_mut(), inner.jobs.get(id)) {
            let line = serde_json::to_string(job).expect("job serializes");
            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                log::error!("journal write failed for {id}: {e}");
            }
        }
    }

    pub fn create(&self, request: EstimateRequest, parent: Option<String>) -> String {
        let mut inner = self.inner.lock().unwrap();
        let id = format!("job-{}", inner.next);
        inner.next += 1;
        let included = request.disclosures.iter().map(|d| d.id.clone()).collect();
        let job = Job {
            job_id: id.clone(),
            state: JobState::Queued,
            parent_job_id: parent,
            request,
            included,
            transcript: Vec::new(),
            result: None,
            estimate: None,
            error: None,
        };
        inner.jobs.insert(id.clone(), job);
        JobStore::record(&mut inner, &id);
        id
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().unwrap().jobs.get(id).cloned()
    }

    fn update<F>(&self, id: &str, to: JobState, f: F) -> Result<(), StoreError>
    where
        F: FnOnce(&mut Job),
    {
        let mut inner = self.inner.lock().unwrap();
        let job = inner
            .jobs
            .get_mut(id)
            .ok_or_else(|| StoreError::Unknown(id.to_string()))?;
        let allowed = match to {
            JobState::Running => job.state == JobState::Queued,
            JobState::Done | JobState::Failed => job.state == JobState::Running,
            JobState::Queued => false,
        };
        if !allowed {
            return Err(StoreError::Transition {
                id: id.to_string(),
                from: job.state,
                to,
            });
        }
        job.state = to;
        f(job);
        if to.is_terminal() {
            JobStore::record(&mut inner, id);
        }
        Ok(())
    }

    pub fn start(&self, id: &str) -> Result<(), StoreError> {
        self.update(id, JobState::Running, |_| {})
    }

    /// Appends a finished stage to a running job.
    pub fn push_stage(&self, id: &str, stage: &StageTranscript) {
        let mut inner = self.inner.lock().unwrap();
        if let Some(job) = inner.jobs.get_mut(id).filter(|j| j.state == JobState::Running) {
            job.transcript.push(stage.clone());
        }
    }

    pub fn finish(&self, id: &str, estimate: EstimateResult, result: PredictedPost) -> Result<(), StoreError> {
        self.update(id, JobState::Done, |job| {
            job.estimate = Some(estimate);
            job.result = Some(result);
        })
    }

    pub fn fail(&self, id: &str, error: String) -> Result<(), StoreError> {
        self.update(id, JobState::Failed, |job| job.error = Some(error))
    }
}

fn job_number(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    pub queue_capacity: usize,
    pub journal: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            workers: 2,
            queue_capacity: 64,
            journal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("job queue is full")]
    QueueFull,
    #[error("service is shutting down")]
    Closed,
}

/// Job store plus a bounded queue drained by a fixed pool of workers.
pub struct Service {
    store: Arc<JobStore>,
    queue: mpsc::Sender<String>,
    _receiver: Arc<tokio::sync::Mutex<mpsc::Receiver<String>>>,
}

impl Service {
    /// Spawns the workers on the current tokio runtime.
    pub fn start(backend: SharedBackend, cfg: ServiceConfig) -> Result<Arc<Service>, ServerError> {
        let (store, pending) = match &cfg.journal {
            Some(path) => JobStore::open(path)?,
            None => (JobStore::in_memory(), Vec::new()),
        };
        let store = Arc::new(store);
        let (tx, rx) = mpsc::channel::<String>(cfg.queue_capacity.max(1));
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for w in 0..cfg.workers {
            let (rx, store, backend) = (rx.clone(), store.clone(), backend.clone());
            tokio::spawn(async move {
                loop {
                    let next = rx.lock().await.recv().await;
                    let Some(id) = next else { break };
                    let (store, backend) = (store.clone(), backend.clone());
                    let job = id.clone();
                    if let Err(e) = tokio::task::spawn_blocking(move || run_job(&store, backend, &job)).await {
                        log::error!("worker {w}: job {id} panicked: {e}");
                    }
                }
            });
        }
        if !pending.is_empty() {
            log::info!("re-queueing {} unfinished jobs from the journal", pending.len());
            let tx = tx.clone();
            tokio::spawn(async move {
                for id in pending {
                    if tx.send(id).await.is_err() {
                        break;
                    }
                }
            });
        }
        Ok(Arc::new(Service {
            store,
            queue: tx,
            _receiver: rx,
        }))
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }

    pub fn submit(&self, request: EstimateRequest, parent: Option<String>) -> Result<String, SubmitError> {
        let permit = self.queue.try_reserve().map_err(|e| match e {
            mpsc::error::TrySendError::Full(_) => SubmitError::QueueFull,
            mpsc::error::TrySendError::Closed(_) => SubmitError::Closed,
        })?;
        let id = self.store.create(request, parent);
        permit.send(id.clone());
        Ok(id)
    }
}

fn run_job(store: &JobStore, backend: SharedBackend, id: &str) {
    let Some(job) = store.get(id) else { return };
    if let Err(e) = store.start(id) {
        log::warn!("{e}");
        return;
    }
    let outcome = job.request.context(id).and_then(|ctx| {
        let observer = |t: &StageTranscript| store.push_stage(id, t);
        estimate(
            backend.as_ref(),
            &ctx,
            &job.request.config,
            job.request.uncertainty,
            Some(&observer),
        )
    });
    let stored = match outcome {
        Ok(out) => store.finish(id, out.estimate, out.prediction),
        Err(e) => {
            log::info!("job {id} failed: {e}");
            store.fail(id, e)
        }
    };
    if let Err(e) = stored {
        log::error!("{e}");
    }
}
