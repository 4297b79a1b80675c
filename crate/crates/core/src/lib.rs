//! Platform-agnostic building blocks for serving versioned, black-box
//! servables.
//!
//! The lifecycle chain is `Source -> Router -> Adapter -> Manager`, with
//! every stage connected through the aspired-versions API
//! ([`servable::AspiredVersionsSink`]). Inference code acquires
//! reference-counted [`manager::ServableHandle`]s from an
//! [`manager::AspiredVersionsManager`] and may route work through the
//! cross-request [`batching`] scheduler.

pub mod batching;
pub mod events;
pub mod executor;
pub mod manager;
pub mod models;
pub mod servable;
pub mod sources;

pub use events::{EventBus, StateEvent};
pub use manager::{AspiredVersionsManager, ManagerConfig, ServableHandle, VersionPolicy};
pub use servable::{
    AspiredVersion, AspiredVersionList, AspiredVersionsSink, InvalidList, LoadError, Loader,
    Servable, ServableId, ServableState,
};
