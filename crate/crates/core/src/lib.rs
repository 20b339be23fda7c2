//! Crowd clustering of fine-grained categories into a class list.
//!
//! The workflow starts from a taxonomy forest of trims (make, model, body,
//! year, trim), asks workers binary "same or different" questions about
//! sibling trims, repairs answers that break transitivity, and takes the
//! connected components of the resulting "same" graph as the final classes.
//!
//! Modules map onto the stages of that workflow:
//!
//! - [`taxonomy`] loads and indexes the forest.
//! - [`graph`] holds the merge graph, the pair schedule and clique checks.
//! - [`classlist`] turns components into named classes.
//! - [`tasks`], [`aggregate`] and [`engine`] package questions into tasks,
//!   grade gold standards, aggregate votes and drive the phase loop.
//! - [`sim`] plants synthetic worlds and simulates noisy workers.
//! - [`eval`] and [`cost`] measure agreement, precision and spend.
//! - [`ingest`] matches listing posts against trim queries and verifies
//!   harvested images.

pub mod aggregate;
pub mod checkpoint;
pub mod classlist;
pub mod cost;
pub mod engine;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod rng;
pub mod sim;
pub mod tasks;
pub mod taxonomy;
mod unionfind;

pub use aggregate::{aggregate_votes, AggregationPolicy, AggregationRule, Aggregate, WorkerQuality};
pub use classlist::{canonical_name, ClassEntry, ClassList};
pub use cost::{expert_cost_estimate, CostLedger, CostModel, CostReport, Money};
pub use engine::{
    Engine, EngineConfig, EngineError, Phase, PhaseReport, RunOutcome, Submission, SubmitOutcome,
    WorkerBackend,
};
pub use eval::{mean_agreement, pairwise_agreement, precision_estimate, Partition};
pub use graph::{
    Answer, GraphError, MergeGraph, Pair, PairState, SiblingGroup, Vote, YearPairPolicy,
};
pub use tasks::{build_tasks, grade_task, BinaryQuery, GoldBank, Subject, Task, TaskError};
pub use taxonomy::{NodeId, RawTrimRecord, TaxonomyError, TaxonomyForest, TrimNode};
