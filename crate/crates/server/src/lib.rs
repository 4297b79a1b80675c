//! HTTP model server built on `modelserve-core`.
//!
//! [`Server::start`] wires a filesystem or command source through the
//! format router into an [`AspiredVersionsManager`](modelserve_core::AspiredVersionsManager)
//! and serves predict, classify and regress requests, optionally through
//! per-version batch queues.

pub mod api;
pub mod batcher;
pub mod cli;
pub mod config;
pub mod http;
pub mod logging;
pub mod server;
pub mod service;

pub use cli::Args;
pub use config::{BatchingSettings, ConfigError, LoaderFactory, ServerConfig, SourceMode};
pub use logging::{RequestLogRecord, RequestLogger};
pub use server::{Server, ServerError};
pub use service::{parse_metrics, Response, Service};
