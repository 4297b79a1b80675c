//! Servable identity, lifecycle states, the loader contract and the
//! aspired-versions API that connects every lifecycle stage.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

/// An opaque loaded servable. The framework never looks inside.
pub type Servable = dyn Any + Send + Sync;

/// Identifies one version of one servable stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServableId {
    pub name: String,
    pub version: u64,
}

impl ServableId {
    pub fn new(name: impl Into<String>, version: u64) -> Self {
        Self {
            name: name.into(),
            version,
        }
    }
}

impl fmt::Display for ServableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.version)
    }
}

/// Returns true when `name` is usable as a servable stream name: non-empty,
/// no path separators, no whitespace.
pub fn is_valid_servable_name(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(|c| c == '/' || c == '\\' || c.is_whitespace())
}

/// Lifecycle state of one servable version record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ServableState {
    New,
    Loading,
    Ready,
    Unloading,
    Disabled,
    Error(String),
}

impl ServableState {
    pub fn name(&self) -> &'static str {
        match self {
            ServableState::New => "New",
            ServableState::Loading => "Loading",
            ServableState::Ready => "Ready",
            ServableState::Unloading => "Unloading",
            ServableState::Disabled => "Disabled",
            ServableState::Error(_) => "Error",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, ServableState::Disabled | ServableState::Error(_))
    }

    /// The payload exists exactly in these states.
    pub fn has_payload(&self) -> bool {
        matches!(self, ServableState::Ready | ServableState::Unloading)
    }

    pub fn error_message(&self) -> Option<&str> {
        match self {
            ServableState::Error(msg) => Some(msg),
            _ => None,
        }
    }
}

impl fmt::Display for ServableState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServableState::Error(msg) => write!(f, "Error({msg})"),
            other => f.write_str(other.name()),
        }
    }
}

/// True iff `from -> to` is an edge of the lifecycle graph:
/// `New->Loading`, `Loading->{Ready,Error}`, `Ready->Unloading`,
/// `Unloading->{Disabled,Error}`.
pub fn validate_transition(from: &ServableState, to: &ServableState) -> bool {
    use ServableState::*;
    matches!(
        (from, to),
        (New, Loading)
            | (Loading, Ready)
            | (Loading, Error(_))
            | (Ready, Unloading)
            | (Unloading, Disabled)
            | (Unloading, Error(_))
    )
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct LoadError {
    pub message: String,
}

impl LoadError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

/// Capability to bring one servable version into memory and release it.
///
/// The manager calls [`Loader::load`] at most once per instance, and
/// [`Loader::unload`] at most once, only with the payload a successful
/// `load` produced.
pub trait Loader: Send {
    /// Resource estimate in bytes. Must be cheap and side-effect-free; it
    /// may be called before `load`.
    fn estimate_memory(&self) -> u64;

    fn load(&mut self) -> Result<Box<Servable>, LoadError>;

    /// Releases the payload. The default simply drops it.
    fn unload(&mut self, servable: Box<Servable>) {
        drop(servable);
    }
}

impl fmt::Debug for dyn Loader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Loader")
            .field("estimate_memory", &self.estimate_memory())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InvalidList {
    #[error("invalid servable name {0:?}")]
    BadName(String),
    #[error("duplicate version {version} in aspired list for {name}")]
    DuplicateVersion { name: String, version: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspiredVersion<T> {
    pub version: u64,
    pub data: T,
}

/// The complete set of versions of one servable a Source wants resident.
/// Versions omitted from the list are ones it wants unloaded.
#[derive(Debug, Clone, PartialEq)]
pub struct AspiredVersionList<T> {
    servable_name: String,
    versions: Vec<AspiredVersion<T>>,
}

impl<T> AspiredVersionList<T> {
    pub fn new(
        servable_name: impl Into<String>,
        versions: Vec<AspiredVersion<T>>,
    ) -> Result<Self, InvalidList> {
        let servable_name = servable_name.into();
        if !is_valid_servable_name(&servable_name) {
            return Err(InvalidList::BadName(servable_name));
        }
        let mut seen = HashSet::with_capacity(versions.len());
        for v in &versions {
            if !seen.insert(v.version) {
                return Err(InvalidList::DuplicateVersion {
                    name: servable_name,
                    version: v.version,
                });
            }
        }
        Ok(Self {
            servable_name,
            versions,
        })
    }

    /// Convenience constructor from `(version, data)` pairs.
    pub fn from_pairs(
        servable_name: impl Into<String>,
        pairs: impl IntoIterator<Item = (u64, T)>,
    ) -> Result<Self, InvalidList> {
        let versions = pairs
            .into_iter()
            .map(|(version, data)| AspiredVersion { version, data })
            .collect();
        Self::new(servable_name, versions)
    }

    pub fn empty(servable_name: impl Into<String>) -> Result<Self, InvalidList> {
        Self::new(servable_name, Vec::new())
    }

    pub fn servable_name(&self) -> &str {
        &self.servable_name
    }

    pub fn versions(&self) -> &[AspiredVersion<T>] {
        &self.versions
    }

    pub fn version_numbers(&self) -> BTreeSet<u64> {
        self.versions.iter().map(|v| v.version).collect()
    }

    pub fn into_parts(self) -> (String, Vec<AspiredVersion<T>>) {
        (self.servable_name, self.versions)
    }

    /// Replaces every payload while keeping names and version numbers.
    pub fn map<U>(self, mut f: impl FnMut(&ServableId, T) -> U) -> AspiredVersionList<U> {
        let name = self.servable_name;
        let versions = self
            .versions
            .into_iter()
            .map(|v| {
                let id = ServableId::new(name.clone(), v.version);
                AspiredVersion {
                    version: v.version,
                    data: f(&id, v.data),
                }
            })
            .collect();
        AspiredVersionList {
            servable_name: name,
            versions,
        }
    }
}

/// Receiver side of the aspired-versions API. Each call replaces the
/// desired set for `list.servable_name()`; repeating a call is a no-op.
pub trait AspiredVersionsSink<T>: Send + Sync {
    fn set_aspired_versions(&self, list: AspiredVersionList<T>);
}

impl<T, S: AspiredVersionsSink<T> + ?Sized> AspiredVersionsSink<T> for Arc<S> {
    fn set_aspired_versions(&self, list: AspiredVersionList<T>) {
        (**self).set_aspired_versions(list)
    }
}

/// A sink that only tracks the declared desired set per servable name.
/// Names that received an empty list are kept as tombstones.
#[derive(Debug, Default)]
pub struct DesiredSet {
    inner: Mutex<BTreeMap<String, BTreeSet<u64>>>,
}

impl DesiredSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<BTreeSet<u64>> {
        self.inner.lock().unwrap().get(name).cloned()
    }

    pub fn snapshot(&self) -> BTreeMap<String, BTreeSet<u64>> {
        self.inner.lock().unwrap().clone()
    }
}

impl<T: Send> AspiredVersionsSink<T> for DesiredSet {
    fn set_aspired_versions(&self, list: AspiredVersionList<T>) {
        let versions = list.version_numbers();
        self.inner
            .lock()
            .unwrap()
            .insert(list.servable_name, versions);
    }
}
