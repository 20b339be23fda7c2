//! The crowd orchestrator: a resumable state machine that drives the
//! within-year and cross-year phases to completion.
//!
//! Work is issued in waves. A wave holds one question per unresolved pair,
//! packed into six-question tasks; the next wave is only built once every
//! task of the current one has been graded. When all pairs of a phase are
//! resolved the engine looks for clique violations, reopens them for another
//! round (up to `max_requery_rounds`), and then moves to the next phase.
//!
//! All mutation goes through [`Engine::submit`] and [`Engine::pump`], so a
//! single owner serializes every change. The full state serializes into a
//! [`Checkpoint`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{aggregate_votes, effective_votes, Aggregate, AggregationPolicy, AggregationRule, WorkerQuality};
use crate::classlist::ClassList;
use crate::cost::{CostLedger, Money};
use crate::graph::{
    clique_violations, cross_year_groups, requery_set, within_year_components,
    within_year_groups, Answer, GraphError, MergeGraph, Pair, PairState, SiblingGroup, Vote,
    YearPairPolicy,
};
use crate::rng::mix;
use crate::tasks::{build_tasks, grade_task, GoldBank, QueryItem, Subject, Task, TaskError, TaskStatus, PAIR_PROMPT};
use crate::taxonomy::{NodeId, TaxonomyForest};

pub const CHECKPOINT_FORMAT: &str = "classlist-checkpoint/1";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("task budget exhausted after {dispatched} task(s); state is resumable")]
    BudgetExhausted { dispatched: u64 },
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("task {task_id} was already submitted by another worker")]
    AlreadySubmitted { task_id: u64 },
    #[error("phase violation: {0}")]
    PhaseOrder(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint does not match inputs: {0}")]
    CheckpointMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WithinYear,
    CrossYear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    WithinYear,
    CrossYear,
    Done,
}

impl Stage {
    fn phase(self) -> Option<Phase> {
        match self {
            Stage::WithinYear => Some(Phase::WithinYear),
            Stage::CrossYear => Some(Phase::CrossYear),
            Stage::Done => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,
    pub redundancy_k: u32,
    pub rule: AggregationRule,
    pub max_requery_rounds: u32,
    /// Re-query clique violations. When off, violations are only reported.
    pub repair: bool,
    pub price_per_task: Money,
    pub year_pairs: YearPairPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            redundancy_k: 3,
            rule: AggregationRule::Majority,
            max_requery_rounds: 3,
            repair: true,
            price_per_task: Money::from_cents(10),
            year_pairs: YearPairPolicy::Adjacent,
        }
    }
}

impl EngineConfig {
    pub fn policy(&self) -> AggregationPolicy {
        AggregationPolicy {
            redundancy_k: self.redundancy_k,
            rule: self.rule,
            worker_quality: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.policy().validate().map_err(EngineError::Config)?;
        if self.price_per_task.0 < 0 {
            return Err(EngineError::Config("price_per_task must be >= 0".into()));
        }
        Ok(())
    }
}

/// One worker's answers to a whole task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub worker_id: String,
    pub answers: Vec<Answer>,
}

/// Anything that can answer tasks: simulated workers or a scripted client.
pub trait WorkerBackend {
    fn answer(&mut self, task: &Task) -> Submission;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum SubmitOutcome {
    Accepted { votes: Vec<Vote> },
    Rejected,
    /// Repeat of an earlier submission by the same worker; nothing recorded.
    Duplicate { original: TaskStatus },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Option<Phase>,
    pub pairs_queried: u64,
    pub tasks_issued: u64,
    pub tasks_accepted: u64,
    pub tasks_rejected: u64,
    /// Violations found at the end of each query round.
    pub violations_per_round: Vec<u64>,
    pub pairs_requeried: u64,
    pub rounds: u32,
    pub cost_delta: Money,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub dispatched: u64,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SubmissionRecord {
    worker_id: String,
    status: TaskStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    stage: Stage,
    round: u32,
    wave: u64,
    next_task_id: u64,
    clock: u64,
    votes_recorded: u64,
    outstanding: BTreeMap<u64, Task>,
    graph: MergeGraph,
    ledger: CostLedger,
    quality: WorkerQuality,
    submissions: BTreeMap<u64, SubmissionRecord>,
    current: PhaseReport,
    reports: Vec<PhaseReport>,
}

/// Serialized engine state plus what it takes to validate a resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: EngineConfig,
    pub forest_fingerprint: u64,
    pub gold_count: usize,
    /// Number of vote-log lines covered by this snapshot.
    pub vote_log_offset: u64,
    pub state: EngineState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        serde_json::from_str(text).map_err(|e| EngineError::CheckpointMismatch(e.to_string()))
    }
}

/// Read-only snapshot of run progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub round: u32,
    pub pairs_by_state: BTreeMap<PairState, usize>,
    pub tasks_open: usize,
    pub tasks_accepted: u64,
    pub tasks_rejected: u64,
    pub components: usize,
    pub violations_pending: usize,
    pub ledger: CostLedger,
    /// Resolved share of the current phase's pairs, in [0, 1].
    pub phase_progress: f64,
}

pub struct Engine {
    forest: TaxonomyForest,
    golds: GoldBank,
    config: EngineConfig,
    state: EngineState,
}

impl Engine {
    pub fn new(forest: TaxonomyForest, golds: GoldBank, config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        if golds.len() < 2 {
            return Err(TaskError::InsufficientGolds(golds.len()).into());
        }
        golds.validate()?;
        let state = EngineState {
            stage: Stage::WithinYear,
            round: 0,
            wave: 0,
            next_task_id: 0,
            clock: 0,
            votes_recorded: 0,
            outstanding: BTreeMap::new(),
            graph: MergeGraph::for_forest(&forest),
            ledger: CostLedger::new(config.price_per_task),
            quality: WorkerQuality::default(),
            submissions: BTreeMap::new(),
            current: PhaseReport {
                phase: Some(Phase::WithinYear),
                ..PhaseReport::default()
            },
            reports: Vec::new(),
        };
        Ok(Self {
            forest,
            golds,
            config,
            state,
        })
    }

    pub fn restore(forest: TaxonomyForest, golds: GoldBank, checkpoint: Checkpoint) -> Result<Self, EngineError> {
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(EngineError::CheckpointMismatch(format!(
                "format `{}`",
                checkpoint.format
            )));
        }
        if checkpoint.forest_fingerprint != forest.fingerprint() {
            return Err(EngineError::CheckpointMismatch("taxonomy differs".into()));
        }
        if checkpoint.gold_count != golds.len() {
            return Err(EngineError::CheckpointMismatch("gold bank differs".into()));
        }
        if checkpoint.state.graph.vertex_count() != forest.len() {
            return Err(EngineError::CheckpointMismatch("graph size differs".into()));
        }
        checkpoint.config.validate()?;
        Ok(Self {
            forest,
            golds,
            config: checkpoint.config,
            state: checkpoint.state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            forest_fingerprint: self.forest.fingerprint(),
            gold_count: self.golds.len(),
            vote_log_offset: self.state.votes_recorded,
            state: self.state.clone(),
        }
    }

    pub fn forest(&self) -> &TaxonomyForest {
        &self.forest
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn graph(&self) -> &MergeGraph {
        &self.state.graph
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.state.ledger
    }

    pub fn stage(&self) -> Stage {
        self.state.stage
    }

    pub fn round(&self) -> u32 {
        self.state.round
    }

    pub fn votes_recorded(&self) -> u64 {
        self.state.votes_recorded
    }

    pub fn is_done(&self) -> bool {
        self.state.stage == Stage::Done
    }

    /// Finished phases, in order.
    pub fn reports(&self) -> &[PhaseReport] {
        &self.state.reports
    }

    pub fn open_tasks(&self) -> impl Iterator<Item = &Task> {
        self.state.outstanding.values()
    }

    pub fn task(&self, task_id: u64) -> Option<&Task> {
        self.state.outstanding.get(&task_id)
    }

    /// Outcome of an already-graded task, with the worker who submitted it.
    pub fn submission(&self, task_id: u64) -> Option<(&str, TaskStatus)> {
        self.state
            .submissions
            .get(&task_id)
            .map(|r| (r.worker_id.as_str(), r.status))
    }

    pub fn class_list(&self) -> ClassList {
        self.state.graph.connected_components(&self.forest)
    }

    fn groups(&self, phase: Phase) -> Result<Vec<SiblingGroup>, EngineError> {
        Ok(match phase {
            Phase::WithinYear => within_year_groups(&self.forest),
            Phase::CrossYear => {
                cross_year_groups(&self.forest, &self.state.graph, self.config.year_pairs)?
            }
        })
    }

    /// Advances the state machine until there is open work or the run is
    /// done. Returns true when done.
    pub fn pump(&mut self) -> Result<bool, EngineError> {
        loop {
            if !self.state.outstanding.is_empty() {
                return Ok(false);
            }
            let Some(phase) = self.state.stage.phase() else {
                return Ok(true);
            };
            let groups = self.groups(phase)?;
            let mut seen = BTreeSet::new();
            let mut need = Vec::new();
            for g in &groups {
                let mut batch = Vec::new();
                for p in g.pairs() {
                    self.state.graph.schedule(p);
                    let resolved = self.state.graph.state(p).is_some_and(PairState::is_resolved);
                    if !resolved && seen.insert(p) {
                        batch.push(p);
                    }
                }
                if !batch.is_empty() {
                    need.push(batch);
                }
            }
            if !need.is_empty() {
                self.issue_wave(phase, &need)?;
                continue;
            }

            let mut violations = BTreeSet::new();
            let mut reopen = BTreeSet::new();
            for g in &groups {
                let v = clique_violations(&self.state.graph, g)?;
                if !v.is_empty() {
                    reopen.extend(requery_set(&self.state.graph, g, &v));
                    violations.extend(v);
                }
            }
            self.state.current.violations_per_round.push(violations.len() as u64);
            let can_repair = self.config.repair && self.state.round < self.config.max_requery_rounds;
            if can_repair && !violations.is_empty() {
                self.state.round += 1;
                for p in &reopen {
                    self.state.graph.mark_requery(*p, self.state.round)?;
                }
                self.state.current.pairs_requeried += reopen.len() as u64;
                continue;
            }

            self.finish_phase();
        }
    }

    fn finish_phase(&mut self) {
        let mut report = std::mem::take(&mut self.state.current);
        report.rounds = self.state.round + 1;
        self.state.reports.push(report);
        self.state.round = 0;
        self.state.stage = match self.state.stage {
            Stage::WithinYear => Stage::CrossYear,
            _ => Stage::Done,
        };
        self.state.current = PhaseReport {
            phase: self.state.stage.phase(),
            ..PhaseReport::default()
        };
    }

    /// Issues one question per pair. Each batch (one sibling group) is
    /// packed into its own tasks, so tasks never mix groups.
    fn issue_wave(&mut self, phase: Phase, batches: &[Vec<Pair>]) -> Result<(), EngineError> {
        let pooled = (phase == Phase::CrossYear)
            .then(|| within_year_components(&self.forest, &self.state.graph));
        let images = |id: NodeId| -> Vec<String> {
            let members = pooled.as_ref().and_then(|m| m.get(&id));
            match members {
                Some(ms) => ms
                    .iter()
                    .filter_map(|m| self.forest.node(*m))
                    .flat_map(|n| n.exemplar_images.iter().cloned())
                    .collect(),
                None => self
                    .forest
                    .node(id)
                    .map(|n| n.exemplar_images.clone())
                    .unwrap_or_default(),
            }
        };
        let mut tasks = Vec::new();
        for batch in batches {
            // seeded by content so unrelated batches are unaffected by extra waves elsewhere
            let head = batch[0];
            let attempt = self.state.graph.record(head).map_or(0, |r| r.dispatches);
            let seed = mix(
                self.config.seed,
                &[phase as u64, u64::from(head.lo().0), u64::from(head.hi().0), u64::from(attempt)],
            );
            let mut items = Vec::with_capacity(batch.len());
            for p in batch {
                let rec = self.state.graph.record(*p).ok_or(GraphError::UnknownPair(*p))?;
                items.push(QueryItem {
                    subject: Subject::Pair(*p),
                    left_images: images(p.lo()),
                    right_images: images(p.hi()),
                    attempt: rec.dispatches,
                });
            }
            let first = self.state.next_task_id + tasks.len() as u64;
            tasks.extend(build_tasks(&items, &self.golds, PAIR_PROMPT, seed, first, self.state.round)?);
        }
        for p in batches.iter().flatten() {
            if self.state.graph.record(*p).is_some_and(|r| r.dispatches == 0) {
                self.state.current.pairs_queried += 1;
            }
            self.state.graph.mark_dispatched(*p)?;
        }
        self.state.wave += 1;
        self.state.next_task_id += tasks.len() as u64;
        self.state.current.tasks_issued += tasks.len() as u64;
        self.state.ledger.tasks_issued += tasks.len() as u64;
        for t in tasks {
            self.state.outstanding.insert(t.task_id, t);
        }
        Ok(())
    }

    /// Grades one task's answers and records the resulting votes and
    /// verdicts. A repeat submission by the same worker is a no-op reported
    /// as [`SubmitOutcome::Duplicate`].
    pub fn submit(
        &mut self,
        task_id: u64,
        worker_id: &str,
        answers: &[Answer],
        timestamp: u64,
    ) -> Result<SubmitOutcome, EngineError> {
        if let Some(rec) = self.state.submissions.get(&task_id) {
            return if rec.worker_id == worker_id {
                Ok(SubmitOutcome::Duplicate { original: rec.status })
            } else {
                Err(EngineError::AlreadySubmitted { task_id })
            };
        }
        let task = self
            .state
            .outstanding
            .get(&task_id)
            .ok_or(EngineError::UnknownTask(task_id))?;
        let grade = grade_task(task, answers)?;
        let mut task = self.state.outstanding.remove(&task_id).expect("present");
        task.assigned_worker = Some(worker_id.to_string());
        task.status = grade.status;
        self.state.clock += 1;
        for ok in grade.gold_correct {
            self.state.quality.record(worker_id, ok);
        }
        self.state.submissions.insert(
            task_id,
            SubmissionRecord {
                worker_id: worker_id.to_string(),
                status: grade.status,
            },
        );

        if grade.status == TaskStatus::Rejected {
            self.state.ledger.tasks_rejected += 1;
            self.state.current.tasks_rejected += 1;
            return Ok(SubmitOutcome::Rejected);
        }

        let mut votes = Vec::new();
        let mut touched = BTreeSet::new();
        for (pos, q) in task.non_gold() {
            let Subject::Pair(pair) = q.subject else { continue };
            let round = self.state.graph.record(pair).map(|r| r.round).unwrap_or(0);
            votes.push(Vote {
                query_id: q.query_id.clone(),
                pair,
                worker_id: worker_id.to_string(),
                answer: answers[pos],
                round,
                task_id,
                timestamp,
            });
            touched.insert(pair);
        }
        for v in &votes {
            self.state.graph.add_votes(v.pair, vec![v.clone()])?;
        }
        self.state.votes_recorded += votes.len() as u64;
        let before = self.state.ledger.total_crowd_cost;
        self.state.ledger.pay(votes.len() as u64);
        self.state.current.cost_delta += Money(self.state.ledger.total_crowd_cost.0 - before.0);
        self.state.current.tasks_accepted += 1;

        let policy = self.aggregation_policy();
        for pair in touched {
            let rec = self.state.graph.record(pair).expect("voted pair is scheduled");
            if rec.state.is_resolved() {
                continue;
            }
            let this_round: Vec<Vote> = rec.current_round_votes().cloned().collect();
            if effective_votes(&this_round).len() < policy.redundancy_k as usize {
                continue;
            }
            if let Aggregate::Decided(verdict) = aggregate_votes(&rec.votes, &policy) {
                self.state.graph.record_verdict(pair, verdict, Vec::new())?;
            }
        }
        Ok(SubmitOutcome::Accepted { votes })
    }

    fn aggregation_policy(&self) -> AggregationPolicy {
        let mut policy = self.config.policy();
        if policy.rule == AggregationRule::QualityWeighted {
            policy.worker_quality = self.state.quality.estimates();
        }
        policy
    }

    /// Drives the run to completion with `backend`, dispatching at most
    /// `budget` tasks. New votes are handed to `sink` as they are recorded.
    pub fn run(
        &mut self,
        backend: &mut dyn WorkerBackend,
        budget: Option<u64>,
        sink: &mut dyn FnMut(&[Vote]),
    ) -> Result<RunOutcome, EngineError> {
        self.run_until(backend, budget, sink, Stage::Done)
    }

    fn run_until(
        &mut self,
        backend: &mut dyn WorkerBackend,
        budget: Option<u64>,
        sink: &mut dyn FnMut(&[Vote]),
        until: Stage,
    ) -> Result<RunOutcome, EngineError> {
        let mut dispatched = 0u64;
        loop {
            let done = self.pump()?;
            if done || self.state.stage >= until {
                return Ok(RunOutcome {
                    dispatched,
                    stage: self.state.stage,
                });
            }
            let task_id = *self.state.outstanding.keys().next().expect("pump left work");
            if budget.is_some_and(|b| dispatched >= b) {
                return Err(EngineError::BudgetExhausted { dispatched });
            }
            dispatched += 1;
            let sub = backend.answer(&self.state.outstanding[&task_id]);
            let ts = self.state.clock;
            if let SubmitOutcome::Accepted { votes } = self.submit(task_id, &sub.worker_id, &sub.answers, ts)? {
                sink(&votes);
            }
        }
    }

    /// Runs one phase to completion. Cross-year work cannot start before
    /// every within-year pair is resolved.
    pub fn run_phase(
        &mut self,
        phase: Phase,
        backend: &mut dyn WorkerBackend,
        budget: Option<u64>,
        sink: &mut dyn FnMut(&[Vote]),
    ) -> Result<PhaseReport, EngineError> {
        let phase_stage = match phase {
            Phase::WithinYear => Stage::WithinYear,
            Phase::CrossYear => Stage::CrossYear,
        };
        if self.state.stage < phase_stage {
            return Err(EngineError::PhaseOrder(format!(
                "{phase:?} requested while {:?} is unfinished",
                self.state.stage
            )));
        }
        let next = match phase {
            Phase::WithinYear => Stage::CrossYear,
            Phase::CrossYear => Stage::Done,
        };
        self.run_until(backend, budget, sink, next)?;
        Ok(self
            .state
            .reports
            .iter()
            .find(|r| r.phase == Some(phase))
            .cloned()
            .unwrap_or_default())
    }

    pub fn progress(&self) -> Progress {
        let graph = &self.state.graph;
        let (phase_progress, violations_pending) = match self.state.stage.phase() {
            None => (1.0, 0),
            Some(phase) => {
                let groups = self.groups(phase).unwrap_or_default();
                let mut total = 0usize;
                let mut resolved = 0usize;
                let mut violations = BTreeSet::new();
                for g in &groups {
                    for p in g.pairs() {
                        total += 1;
                        if graph.state(p).is_some_and(PairState::is_resolved) {
                            resolved += 1;
                        }
                    }
                    if let Ok(v) = clique_violations(graph, g) {
                        violations.extend(v);
                    }
                }
                let frac = if total == 0 { 1.0 } else { resolved as f64 / total as f64 };
                (frac, violations.len())
            }
        };
        let accepted = self.state.reports.iter().map(|r| r.tasks_accepted).sum::<u64>()
            + self.state.current.tasks_accepted;
        let rejected = self.state.reports.iter().map(|r| r.tasks_rejected).sum::<u64>()
            + self.state.current.tasks_rejected;
        Progress {
            stage: self.state.stage,
            round: self.state.round,
            pairs_by_state: graph.state_counts(),
            tasks_open: self.state.outstanding.len(),
            tasks_accepted: accepted,
            tasks_rejected: rejected,
            components: graph.component_count(),
            violations_pending,
            ledger: self.state.ledger.clone(),
            phase_progress,
        }
    }
}
