//! HTTP serving for RQA pipelines.
//!
//! A [`controller`] exposes the chat, feedback and static-evaluation API,
//! persists sessions and ratings under a data directory, and forwards each
//! chat turn to one of several registered [`worker`]s chosen by
//! least-outstanding-requests with a round-robin tie-break.

pub mod controller;
pub mod error;
pub mod persistence;
pub mod protocol;
pub mod worker;

pub use controller::{Controller, ControllerConfig};
pub use error::ApiError;
pub use worker::{Worker, WorkerConfig};
