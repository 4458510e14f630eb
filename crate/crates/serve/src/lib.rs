//! Human annotation mode: a [`Labeler`](albalance::harness::Labeler) that
//! parks each labeling round in a shared queue and an HTTP API that drains it.
//!
//! The loop thread blocks inside [`HumanLabeler`] until every queued unit has
//! been labeled or skipped through `POST /api/labels`. Each answer is written
//! to the journal before the request returns, so a restarted run replays it.

mod api;
mod session;

pub use api::{router, serve};
pub use session::{
    BoundingBox, HumanLabeler, Phase, QueueItem, Session, SessionStatus, SubmitError, SubmitReceipt, Submission, UnitMask,
};
