//! Discovery of servable versions and the stages that turn storage paths
//! into loaders: sources, routers and adapters.

mod adapter;
mod command;
mod config;
mod filesystem;
mod router;

pub use adapter::{AdaptingSink, Chain, FormatAdapter, RebaseAdapter, SourceAdapter};
pub use command::CommandSource;
pub use config::{SourceConfig, SourceEntry, VersionSelection};
pub use filesystem::{
    parse_version_dir, poll_once, scan_versions, select_versions, FileSystemSource, PollResult,
    ScanResult, Selected, SourceDriver, SourceHealth,
};
pub use router::{NameMatch, RouteRule, RouteTable, SourceRouter};

use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SourceError {
    #[error("cannot read {path}: {reason}")]
    PathUnreadable { path: PathBuf, reason: String },
    #[error("invalid source config: {0}")]
    InvalidConfig(String),
}
