//! HTTP task service for live workers.
//!
//! [`TaskService`] owns the engine and hands out tasks under time-limited
//! leases; [`router`] exposes it as JSON over HTTP. Every mutation goes
//! through one mutex, so the engine sees submissions one at a time in the
//! order they arrive.

mod api;
mod clock;
mod service;

pub use api::{router, Shared};
pub use clock::{Clock, ManualClock, SystemClock};
pub use service::{
    Lease, Outcome, QuestionPayload, ServiceConfig, ServiceError, Stats, SubmitResponse,
    TaskPayload, TaskService, CHECKPOINT_FILE, VOTE_LOG_FILE,
};
