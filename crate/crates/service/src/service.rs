use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use classlist_core::checkpoint::{write_atomic, VoteLog};
use classlist_core::engine::{Checkpoint, Progress, Stage};
use classlist_core::tasks::{TaskStatus, QUESTIONS_PER_TASK};
use classlist_core::{
    Answer, ClassList, Engine, EngineConfig, EngineError, GoldBank, SubmitOutcome, Task,
    TaxonomyForest,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const VOTE_LOG_FILE: &str = "votes.jsonl";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("worker id must be non-empty")]
    EmptyWorker,
    #[error("lease on task {task_id} expired")]
    LeaseExpired { task_id: u64 },
    #[error("task {task_id} is not leased to this worker")]
    NotYourLease { task_id: u64 },
    #[error("expected {expected} answers, got {got}")]
    WrongAnswerCount { expected: usize, got: usize },
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("storage: {0}")]
    Io(#[from] io::Error),
}

impl ServiceError {
    /// Stable machine-readable code for the wire.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::EmptyWorker => "empty_worker",
            ServiceError::LeaseExpired { .. } => "lease_expired",
            ServiceError::NotYourLease { .. } => "not_your_lease",
            ServiceError::WrongAnswerCount { .. } => "wrong_answer_count",
            ServiceError::UnknownTask(_) => "unknown_task",
            ServiceError::Engine(_) => "engine",
            ServiceError::Io(_) => "storage",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub lease_duration_ms: u64,
    /// Start the next query round as soon as the current one drains. When
    /// off, the requester advances rounds explicitly.
    pub auto_advance: bool,
    /// Where the checkpoint and vote log live. `None` keeps everything in
    /// memory.
    pub data_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            lease_duration_ms: 10 * 60 * 1000,
            auto_advance: true,
            data_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub task_id: u64,
    pub worker_id: String,
    pub deadline_ms: u64,
}

/// One question as a worker sees it. Deliberately has no gold fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionPayload {
    pub query_id: String,
    pub left_images: Vec<String>,
    pub right_images: Vec<String>,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPayload {
    pub task_id: u64,
    pub questions: Vec<QuestionPayload>,
}

impl TaskPayload {
    pub fn from_task(task: &Task) -> Self {
        Self {
            task_id: task.task_id,
            questions: task
                .questions
                .iter()
                .map(|q| QuestionPayload {
                    query_id: q.query_id.clone(),
                    left_images: q.left_images.clone(),
                    right_images: q.right_images.clone(),
                    prompt: q.prompt.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Rejected,
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub outcome: Outcome,
    /// For duplicates, what the first submission was graded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original: Option<Outcome>,
    pub votes_recorded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    #[serde(flatten)]
    pub progress: Progress,
    pub tasks_leased: usize,
    pub tasks_available: usize,
    pub votes_recorded: u64,
    pub done: bool,
}

struct Store {
    dir: PathBuf,
    log: VoteLog,
}

/// Engine plus lease bookkeeping and optional on-disk state.
pub struct TaskService {
    engine: Engine,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    leases: BTreeMap<u64, Lease>,
    /// (task, worker) leases that ran out, so late submissions get a
    /// precise error.
    expired: BTreeSet<(u64, String)>,
    store: Option<Store>,
}

impl TaskService {
    /// Starts a fresh run, or resumes the one checkpointed in
    /// `config.data_dir`. Leases are not persisted: after a restart every
    /// open task is back in the pool.
    pub fn open(
        forest: TaxonomyForest,
        golds: GoldBank,
        engine_config: EngineConfig,
        config: ServiceConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let (engine, store) = match &config.data_dir {
            None => (Engine::new(forest, golds, engine_config)?, None),
            Some(dir) => {
                let cp_path = dir.join(CHECKPOINT_FILE);
                let log_path = dir.join(VOTE_LOG_FILE);
                if cp_path.exists() {
                    let cp = Checkpoint::from_json(&std::fs::read_to_string(&cp_path)?)?;
                    let log = VoteLog::resume(&log_path, cp.vote_log_offset)?;
                    let engine = Engine::restore(forest, golds, cp)?;
                    (engine, Some(Store { dir: dir.clone(), log }))
                } else {
                    let engine = Engine::new(forest, golds, engine_config)?;
                    let log = VoteLog::create(&log_path)?;
                    (engine, Some(Store { dir: dir.clone(), log }))
                }
            }
        };
        let mut svc = Self {
            engine,
            config,
            clock,
            leases: BTreeMap::new(),
            expired: BTreeSet::new(),
            store,
        };
        if svc.config.auto_advance {
            svc.engine.pump()?;
        }
        svc.persist()?;
        Ok(svc)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.store.as_ref().map(|s| s.dir.as_path())
    }

    pub fn leases(&self) -> impl Iterator<Item = &Lease> {
        self.leases.values()
    }

    /// Leases an open task to `worker`, or returns the one it already holds.
    pub fn next_task(&mut self, worker: &str) -> Result<Option<TaskPayload>, ServiceError> {
        if worker.is_empty() {
            return Err(ServiceError::EmptyWorker);
        }
        let now = self.clock.now_ms();
        let held = self
            .leases
            .values()
            .find(|l| l.worker_id == worker && l.deadline_ms > now)
            .map(|l| l.task_id);
        if let Some(task) = held.and_then(|id| self.engine.task(id)) {
            return Ok(Some(TaskPayload::from_task(task)));
        }
        self.expire(now);
        if self.config.auto_advance && self.engine.open_tasks().next().is_none() {
            self.engine.pump()?;
            self.persist()?;
        }
        let Some(task) = self
            .engine
            .open_tasks()
            .find(|t| !self.leases.contains_key(&t.task_id))
        else {
            return Ok(None);
        };
        let payload = TaskPayload::from_task(task);
        self.leases.insert(
            task.task_id,
            Lease {
                task_id: task.task_id,
                worker_id: worker.to_string(),
                deadline_ms: now.saturating_add(self.config.lease_duration_ms),
            },
        );
        Ok(Some(payload))
    }

    fn expire(&mut self, now: u64) {
        let stale: Vec<u64> = self
            .leases
            .values()
            .filter(|l| l.deadline_ms <= now || self.engine.task(l.task_id).is_none())
            .map(|l| l.task_id)
            .collect();
        for id in stale {
            let lease = self.leases.remove(&id).expect("listed");
            self.expired.insert((id, lease.worker_id));
        }
    }

    fn lost_lease(&self, task_id: u64, worker: &str) -> ServiceError {
        if self.expired.contains(&(task_id, worker.to_string())) {
            ServiceError::LeaseExpired { task_id }
        } else {
            ServiceError::NotYourLease { task_id }
        }
    }

    /// Grades six ordered answers. A repeat by the same worker returns
    /// [`Outcome::Duplicate`] and records nothing.
    pub fn submit(
        &mut self,
        task_id: u64,
        worker: &str,
        answers: &[Answer],
    ) -> Result<SubmitResponse, ServiceError> {
        if worker.is_empty() {
            return Err(ServiceError::EmptyWorker);
        }
        if let Some((by, status)) = self.engine.submission(task_id) {
            if by != worker {
                return Err(self.lost_lease(task_id, worker));
            }
            let original = match status {
                TaskStatus::Rejected => Outcome::Rejected,
                _ => Outcome::Accepted,
            };
            return Ok(SubmitResponse {
                outcome: Outcome::Duplicate,
                original: Some(original),
                votes_recorded: 0,
            });
        }
        if self.engine.task(task_id).is_none() {
            return Err(ServiceError::UnknownTask(task_id));
        }
        if answers.len() != QUESTIONS_PER_TASK {
            return Err(ServiceError::WrongAnswerCount {
                expected: QUESTIONS_PER_TASK,
                got: answers.len(),
            });
        }
        let now = self.clock.now_ms();
        match self.leases.get(&task_id) {
            Some(l) if l.worker_id == worker && l.deadline_ms > now => {}
            Some(l) if l.worker_id == worker => {
                self.leases.remove(&task_id);
                self.expired.insert((task_id, worker.to_string()));
                return Err(ServiceError::LeaseExpired { task_id });
            }
            _ => return Err(self.lost_lease(task_id, worker)),
        }
        let outcome = self.engine.submit(task_id, worker, answers, now)?;
        self.leases.remove(&task_id);
        let response = match outcome {
            SubmitOutcome::Accepted { votes } => {
                if let Some(store) = &mut self.store {
                    store.log.append(&votes)?;
                }
                SubmitResponse {
                    outcome: Outcome::Accepted,
                    original: None,
                    votes_recorded: votes.len(),
                }
            }
            SubmitOutcome::Rejected => SubmitResponse {
                outcome: Outcome::Rejected,
                original: None,
                votes_recorded: 0,
            },
            SubmitOutcome::Duplicate { .. } => unreachable!("checked above"),
        };
        if self.config.auto_advance {
            self.engine.pump()?;
        }
        self.persist()?;
        Ok(response)
    }

    /// Starts the next round or phase if the current one has drained.
    pub fn advance(&mut self) -> Result<Stats, ServiceError> {
        self.engine.pump()?;
        self.persist()?;
        Ok(self.stats())
    }

    /// Read-only snapshot; never changes lease or engine state.
    pub fn stats(&self) -> Stats {
        let now = self.clock.now_ms();
        let leased = self
            .leases
            .values()
            .filter(|l| l.deadline_ms > now && self.engine.task(l.task_id).is_some())
            .count();
        let progress = self.engine.progress();
        Stats {
            tasks_available: progress.tasks_open - leased,
            tasks_leased: leased,
            votes_recorded: self.engine.votes_recorded(),
            done: progress.stage == Stage::Done,
            progress,
        }
    }

    pub fn classes(&self) -> ClassList {
        self.engine.class_list()
    }

    /// Writes the checkpoint now. A no-op without a data directory.
    pub fn persist(&mut self) -> Result<(), ServiceError> {
        if let Some(store) = &self.store {
            let cp = self.engine.checkpoint();
            debug_assert_eq!(cp.vote_log_offset, store.log.lines());
            write_atomic(&store.dir.join(CHECKPOINT_FILE), cp.to_json().as_bytes())?;
        }
        Ok(())
    }
}
