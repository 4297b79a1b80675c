use std::collections::HashMap;
use std::fmt;
use std::mem::ManuallyDrop;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_channel::Sender;

use super::Msg;
use crate::executor;
use crate::servable::{Servable, ServableId};

/// A loaded payload as the manager and its readers share it.
pub(crate) struct Entry {
    pub(crate) id: ServableId,
    pub(crate) payload: Box<Servable>,
    pub(crate) outstanding: AtomicUsize,
    pub(crate) unloading: AtomicBool,
    pub(crate) notify: Sender<Msg>,
}

impl Entry {
    pub(crate) fn new(id: ServableId, payload: Box<Servable>, notify: Sender<Msg>) -> Self {
        Self {
            id,
            payload,
            outstanding: AtomicUsize::new(0),
            unloading: AtomicBool::new(false),
            notify,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionSpec {
    Latest,
    Exact(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HandleError {
    #[error("servable {0} not found")]
    NotFound(String),
    #[error("version {version} of servable {name} is not available")]
    VersionNotFound { name: String, version: u64 },
}

/// Borrowed access to a `Ready` servable version.
///
/// While any handle to a version is alive its payload stays resident, even
/// when the manager has already taken the version out of service. Dropping
/// the handle releases it; that never runs the payload's destructor, which
/// the manager performs later on a load thread.
pub struct ServableHandle {
    entry: ManuallyDrop<Arc<Entry>>,
    acquired_on: &'static str,
}

impl ServableHandle {
    fn acquire(entry: &Arc<Entry>) -> Self {
        entry.outstanding.fetch_add(1, Ordering::Relaxed);
        Self {
            entry: ManuallyDrop::new(Arc::clone(entry)),
            acquired_on: executor::current_tag(),
        }
    }

    pub fn id(&self) -> &ServableId {
        &self.entry.id
    }

    pub fn version(&self) -> u64 {
        self.entry.id.version
    }

    pub fn payload(&self) -> &Servable {
        &*self.entry.payload
    }

    pub fn get<T: 'static>(&self) -> Option<&T> {
        self.entry.payload.downcast_ref::<T>()
    }

    /// Executor tag of the thread that acquired the handle.
    pub fn acquired_on(&self) -> &'static str {
        self.acquired_on
    }

    /// Explicit release; equivalent to dropping the handle.
    pub fn release(self) {}
}

impl Clone for ServableHandle {
    fn clone(&self) -> Self {
        Self::acquire(&self.entry)
    }
}

impl Drop for ServableHandle {
    fn drop(&mut self) {
        self.entry.outstanding.fetch_sub(1, Ordering::Release);
        let notify = self
            .entry
            .unloading
            .load(Ordering::Acquire)
            .then(|| self.entry.notify.clone());
        // SAFETY: the entry is never touched again after this.
        unsafe { ManuallyDrop::drop(&mut self.entry) };
        if let Some(tx) = notify {
            let _ = tx.send(Msg::Wake);
        }
    }
}

impl fmt::Debug for ServableHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServableHandle")
            .field("id", &self.entry.id)
            .field("acquired_on", &self.acquired_on)
            .finish()
    }
}

/// Immutable map of every `Ready` version, published by the manager.
///
/// Readers that keep an older snapshot can still resolve versions in it;
/// the entries stay alive for as long as the snapshot does.
#[derive(Default)]
pub struct ServableMapSnapshot {
    epoch: u64,
    by_name: HashMap<String, Vec<Arc<Entry>>>,
}

impl ServableMapSnapshot {
    /// `entries` must be sorted by version within each name.
    pub(crate) fn new(epoch: u64, by_name: HashMap<String, Vec<Arc<Entry>>>) -> Self {
        Self { epoch, by_name }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.by_name.keys().cloned().collect();
        names.sort();
        names
    }

    /// Ready versions of `name`, ascending.
    pub fn versions(&self, name: &str) -> Vec<u64> {
        self.by_name
            .get(name)
            .map(|es| es.iter().map(|e| e.id.version).collect())
            .unwrap_or_default()
    }

    pub fn contains(&self, id: &ServableId) -> bool {
        self.find(&id.name, VersionSpec::Exact(id.version)).is_ok()
    }

    pub fn get_handle(&self, name: &str, spec: VersionSpec) -> Result<ServableHandle, HandleError> {
        self.find(name, spec).map(ServableHandle::acquire)
    }

    fn find(&self, name: &str, spec: VersionSpec) -> Result<&Arc<Entry>, HandleError> {
        let entries = self
            .by_name
            .get(name)
            .filter(|es| !es.is_empty())
            .ok_or_else(|| HandleError::NotFound(name.to_string()))?;
        match spec {
            VersionSpec::Latest => Ok(entries.last().expect("non-empty")),
            VersionSpec::Exact(version) => entries
                .binary_search_by_key(&version, |e| e.id.version)
                .map(|i| &entries[i])
                .map_err(|_| HandleError::VersionNotFound {
                    name: name.to_string(),
                    version,
                }),
        }
    }
}

impl fmt::Debug for ServableMapSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for name in self.names() {
            m.entry(&name, &self.versions(&name));
        }
        m.finish()?;
        write!(f, " @ epoch {}", self.epoch)
    }
}
