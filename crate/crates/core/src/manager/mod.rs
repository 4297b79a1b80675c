//! The aspired-versions manager: turns declarative "these versions should
//! be resident" lists into concrete load and unload actions, and hands out
//! reference-counted handles to whatever is `Ready`.
//!
//! A single driver thread owns every state transition. Loads and payload
//! destruction run on a dedicated load pool and report back to the driver
//! over a channel. Readers resolve handles through an atomically swapped
//! snapshot and never take the manager's lock.

mod handle;
mod policy;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use log::{debug, info, warn};

use crate::events::{monotonic_nanos, EventBus, StateEvent};
use crate::executor::{self, ThreadPool};
use crate::servable::{
    validate_transition, AspiredVersionList, AspiredVersionsSink, LoadError, Loader, Servable,
    ServableId, ServableState,
};
use handle::Entry;

pub use handle::{HandleError, ServableHandle, ServableMapSnapshot, VersionSpec};
pub use policy::{policy_next_action, PolicyAction, VersionPolicy, VersionView};

/// Unaspired terminal records kept per servable for status reporting.
const MAX_TOMBSTONES: usize = 16;

pub(crate) enum Msg {
    Wake,
    Loaded {
        id: ServableId,
        loader: Box<dyn Loader>,
        result: Result<Box<Servable>, LoadError>,
        tag: &'static str,
    },
    Destroyed {
        id: ServableId,
        tag: &'static str,
    },
    Stop,
}

pub type TrimHook = Arc<dyn Fn(&ServableId) + Send + Sync>;
pub type PublishHook = Arc<dyn Fn(u64) + Send + Sync>;

#[derive(Clone)]
pub struct ManagerConfig {
    pub policy: VersionPolicy,
    pub num_load_threads: usize,
    /// Threads used by [`AspiredVersionsManager::initial_load`].
    pub num_initial_load_threads: usize,
    /// Upper bound on how long the driver sleeps between steps.
    pub manage_interval: Duration,
    /// Called on a load thread after each payload has been destroyed.
    pub allocator_trim_hook: Option<TrimHook>,
    /// Called with the new epoch just before each snapshot is published.
    pub on_publish: Option<PublishHook>,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            policy: VersionPolicy::AvailabilityPreserving,
            num_load_threads: 2,
            num_initial_load_threads: thread::available_parallelism().map_or(4, |n| n.get()),
            manage_interval: Duration::from_millis(100),
            allocator_trim_hook: None,
            on_publish: None,
        }
    }
}

impl ManagerConfig {
    pub fn with_policy(mut self, policy: VersionPolicy) -> Self {
        self.policy = policy;
        self
    }
}

impl fmt::Debug for ManagerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManagerConfig")
            .field("policy", &self.policy)
            .field("num_load_threads", &self.num_load_threads)
            .field("num_initial_load_threads", &self.num_initial_load_threads)
            .field("manage_interval", &self.manage_interval)
            .field("allocator_trim_hook", &self.allocator_trim_hook.is_some())
            .field("on_publish", &self.on_publish.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionStatus {
    pub version: u64,
    pub state: ServableState,
    pub is_aspired: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManagerMetrics {
    pub loads: u64,
    pub load_failures: u64,
    pub unloads: u64,
    pub outstanding_handles: usize,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialLoadReport {
    pub loaded: Vec<ServableId>,
    pub failed: Vec<(ServableId, String)>,
    pub elapsed: Duration,
    pub threads: usize,
}

struct Record {
    state: ServableState,
    is_aspired: bool,
    loader: Option<Box<dyn Loader>>,
    entry: Option<Arc<Entry>>,
    destroying: bool,
    /// Loader for a version re-aspired while it was unloading.
    reload: Option<Box<dyn Loader>>,
}

impl Record {
    fn new(loader: Box<dyn Loader>) -> Self {
        Self {
            state: ServableState::New,
            is_aspired: true,
            loader: Some(loader),
            entry: None,
            destroying: false,
            reload: None,
        }
    }
}

#[derive(Default)]
struct State {
    servables: BTreeMap<String, BTreeMap<u64, Record>>,
    epoch: u64,
    dirty: bool,
}

struct Shared {
    config: ManagerConfig,
    events: Arc<EventBus>,
    snapshot: ArcSwap<ServableMapSnapshot>,
    state: Mutex<State>,
    tx: Sender<Msg>,
    rx: Receiver<Msg>,
    load_pool: ThreadPool,
    loads: AtomicU64,
    load_failures: AtomicU64,
    unloads: AtomicU64,
}

/// Manages the versions of every servable fed to it through
/// [`AspiredVersionsSink::set_aspired_versions`].
///
/// The driver only runs once [`start`](Self::start) is called, which lets a
/// server run [`initial_load`](Self::initial_load) first.
pub struct AspiredVersionsManager {
    shared: Arc<Shared>,
    driver: Mutex<Option<JoinHandle<()>>>,
}

impl AspiredVersionsManager {
    pub fn new(config: ManagerConfig) -> Self {
        Self::with_event_bus(config, Arc::new(EventBus::new()))
    }

    pub fn with_event_bus(config: ManagerConfig, events: Arc<EventBus>) -> Self {
        let (tx, rx) = crossbeam_channel::unbounded();
        let load_pool = ThreadPool::new(executor::LOAD, config.num_load_threads.max(1));
        Self {
            shared: Arc::new(Shared {
                config,
                events,
                snapshot: ArcSwap::from_pointee(ServableMapSnapshot::default()),
                state: Mutex::new(State::default()),
                tx,
                rx,
                load_pool,
                loads: AtomicU64::new(0),
                load_failures: AtomicU64::new(0),
                unloads: AtomicU64::new(0),
            }),
            driver: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.shared.config
    }

    pub fn events(&self) -> &Arc<EventBus> {
        &self.shared.events
    }

    /// Starts the driver thread. Calling it again has no effect.
    pub fn start(&self) {
        let mut driver = self.driver.lock().unwrap();
        if driver.is_none() {
            let shared = Arc::clone(&self.shared);
            let handle = thread::Builder::new()
                .name("manager".into())
                .spawn(move || shared.run_driver())
                .expect("spawn manager driver");
            *driver = Some(handle);
        }
    }

    pub fn is_running(&self) -> bool {
        self.driver.lock().unwrap().is_some()
    }

    /// Loads every aspired `New` version with `num_initial_load_threads`
    /// threads and publishes the result. Meant to run once, before
    /// [`start`](Self::start).
    pub fn initial_load(&self) -> InitialLoadReport {
        let started = Instant::now();
        let shared = &self.shared;
        let mut jobs = Vec::new();
        {
            let mut st = shared.lock();
            for (name, records) in st.servables.iter_mut() {
                for (&version, rec) in records.iter_mut() {
                    if rec.is_aspired && rec.state == ServableState::New {
                        let id = ServableId::new(name.clone(), version);
                        let loader = rec.loader.take().expect("new record has a loader");
                        shared.transition(rec, &id, ServableState::Loading, executor::MANAGER);
                        jobs.push((id, loader));
                    }
                }
            }
        }

        let threads = shared.config.num_initial_load_threads.clamp(1, jobs.len().max(1));
        let (job_tx, job_rx) = crossbeam_channel::unbounded();
        for job in jobs {
            job_tx.send(job).unwrap();
        }
        drop(job_tx);
        let results = Mutex::new(Vec::new());
        thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| {
                    executor::set_current_tag(executor::LOAD);
                    for (id, mut loader) in job_rx.iter() {
                        let result = run_load(&id, loader.as_mut());
                        results.lock().unwrap().push((id, loader, result));
                    }
                });
            }
        });

        let mut report = InitialLoadReport {
            loaded: Vec::new(),
            failed: Vec::new(),
            elapsed: Duration::ZERO,
            threads,
        };
        let mut st = shared.lock();
        for (id, loader, result) in results.into_inner().unwrap() {
            match &result {
                Ok(_) => report.loaded.push(id.clone()),
                Err(e) => report.failed.push((id.clone(), e.message.clone())),
            }
            if let Some(rec) = st.record_mut(&id) {
                rec.loader = Some(loader);
            }
            shared.apply_loaded(&mut st, id, result, executor::LOAD);
        }
        if st.dirty {
            shared.publish(&mut st);
        }
        drop(st);
        report.loaded.sort();
        report.failed.sort();
        report.elapsed = started.elapsed();
        info!(
            "initial load: {} loaded, {} failed in {:?} on {} threads",
            report.loaded.len(),
            report.failed.len(),
            report.elapsed,
            threads
        );
        report
    }

    /// Resolves a handle against the current snapshot without locking.
    pub fn get_handle(&self, name: &str, spec: VersionSpec) -> Result<ServableHandle, HandleError> {
        self.shared.snapshot.load().get_handle(name, spec)
    }

    pub fn snapshot(&self) -> Arc<ServableMapSnapshot> {
        self.shared.snapshot.load_full()
    }

    /// Every version record of `name`, ascending. `None` if the manager has
    /// never seen an aspired list for it.
    pub fn status(&self, name: &str) -> Option<Vec<VersionStatus>> {
        let st = self.shared.lock();
        st.servables.get(name).map(|records| {
            records
                .iter()
                .map(|(&version, rec)| VersionStatus {
                    version,
                    state: rec.state.clone(),
                    is_aspired: rec.is_aspired,
                })
                .collect()
        })
    }

    pub fn servable_names(&self) -> Vec<String> {
        self.shared.lock().servables.keys().cloned().collect()
    }

    /// Versions currently in the aspired set of `name`, ascending.
    pub fn aspired_versions(&self, name: &str) -> Vec<u64> {
        let st = self.shared.lock();
        st.servables
            .get(name)
            .map(|r| r.iter().filter(|(_, rec)| rec.is_aspired).map(|(&v, _)| v).collect())
            .unwrap_or_default()
    }

    pub fn metrics(&self) -> ManagerMetrics {
        let st = self.shared.lock();
        let outstanding_handles = st
            .servables
            .values()
            .flat_map(|r| r.values())
            .filter_map(|rec| rec.entry.as_ref())
            .map(|e| e.outstanding.load(Ordering::Acquire))
            .sum();
        ManagerMetrics {
            loads: self.shared.loads.load(Ordering::Relaxed),
            load_failures: self.shared.load_failures.load(Ordering::Relaxed),
            unloads: self.shared.unloads.load(Ordering::Relaxed),
            outstanding_handles,
            epoch: st.epoch,
        }
    }

    /// True once no record is loading, unloading, or waiting to load.
    pub fn is_quiescent(&self) -> bool {
        let st = self.shared.lock();
        st.servables.values().flat_map(|r| r.values()).all(|rec| match rec.state {
            ServableState::Loading | ServableState::Unloading => false,
            ServableState::New => !rec.is_aspired,
            _ => true,
        })
    }

    /// Polls until `pred` holds or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, mut pred: impl FnMut(&Self) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if pred(self) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    /// Withdraws every servable, waits up to `timeout` for their payloads
    /// to be destroyed, and stops the driver. Returns whether everything was
    /// unloaded in time.
    pub fn shutdown(&self, timeout: Duration) -> bool {
        self.start();
        for name in self.servable_names() {
            self.shared
                .apply_list(&name, Vec::new());
        }
        let _ = self.shared.tx.send(Msg::Wake);
        let done = self.wait_until(timeout, |m| {
            let st = m.shared.lock();
            st.servables
                .values()
                .flat_map(|r| r.values())
                .all(|rec| rec.state.is_terminal() || rec.state == ServableState::New)
        });
        if !done {
            warn!("shutdown timed out with servables still resident");
        }
        self.stop();
        done
    }

    fn stop(&self) {
        if let Some(handle) = self.driver.lock().unwrap().take() {
            let _ = self.shared.tx.send(Msg::Stop);
            let _ = handle.join();
        }
    }
}

impl Drop for AspiredVersionsManager {
    fn drop(&mut self) {
        self.stop();
    }
}

impl fmt::Debug for AspiredVersionsManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AspiredVersionsManager")
            .field("config", &self.shared.config)
            .field("snapshot", &*self.shared.snapshot.load())
            .finish()
    }
}

impl AspiredVersionsSink<Box<dyn Loader>> for AspiredVersionsManager {
    fn set_aspired_versions(&self, list: AspiredVersionList<Box<dyn Loader>>) {
        let (name, versions) = list.into_parts();
        let pairs = versions.into_iter().map(|v| (v.version, v.data)).collect();
        self.shared.apply_list(&name, pairs);
        let _ = self.shared.tx.send(Msg::Wake);
    }
}

fn run_load(id: &ServableId, loader: &mut dyn Loader) -> Result<Box<Servable>, LoadError> {
    match catch_unwind(AssertUnwindSafe(|| loader.load())) {
        Ok(result) => result,
        Err(_) => Err(LoadError::new(format!("loader for {id} panicked"))),
    }
}

impl State {
    fn record_mut(&mut self, id: &ServableId) -> Option<&mut Record> {
        self.servables.get_mut(&id.name)?.get_mut(&id.version)
    }
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn transition(&self, rec: &mut Record, id: &ServableId, to: ServableState, tag: &str) {
        debug_assert!(
            validate_transition(&rec.state, &to),
            "{id}: illegal transition {} -> {to}",
            rec.state
        );
        debug!("{id}: {} -> {to} [{tag}]", rec.state);
        let from = std::mem::replace(&mut rec.state, to.clone());
        self.events.emit(StateEvent {
            id: id.clone(),
            from,
            to,
            timestamp_ns: monotonic_nanos(),
            executor_tag: tag.to_string(),
        });
    }

    /// Replaces the aspired set of `name` with `versions`.
    fn apply_list(&self, name: &str, versions: Vec<(u64, Box<dyn Loader>)>) {
        let mut st = self.lock();
        let records = st.servables.entry(name.to_string()).or_default();
        let aspired: std::collections::BTreeSet<u64> = versions.iter().map(|(v, _)| *v).collect();
        for (version, loader) in versions {
            match records.get_mut(&version) {
                None => {
                    records.insert(version, Record::new(loader));
                }
                Some(rec) if rec.state.is_terminal() && !rec.is_aspired => {
                    *rec = Record::new(loader);
                }
                Some(rec) if rec.state == ServableState::Unloading && !rec.is_aspired => {
                    rec.reload = Some(loader);
                }
                Some(_) => {}
            }
        }
        for (version, rec) in records.iter_mut() {
            rec.is_aspired = aspired.contains(version);
            if !rec.is_aspired {
                rec.reload = None;
            }
        }
        records.retain(|_, rec| rec.is_aspired || rec.state != ServableState::New);

        let tombstones: Vec<u64> = records
            .iter()
            .filter(|(_, rec)| !rec.is_aspired && rec.state.is_terminal())
            .map(|(&v, _)| v)
            .collect();
        if tombstones.len() > MAX_TOMBSTONES {
            for v in &tombstones[..tombstones.len() - MAX_TOMBSTONES] {
                records.remove(v);
            }
        }
    }

    fn run_driver(self: Arc<Self>) {
        executor::set_current_tag(executor::MANAGER);
        let interval = self.config.manage_interval;
        loop {
            let mut msgs = Vec::new();
            match self.rx.recv_timeout(interval) {
                Ok(m) => msgs.push(m),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
            msgs.extend(self.rx.try_iter());
            let mut st = self.lock();
            let mut stop = false;
            for msg in msgs {
                match msg {
                    Msg::Wake => {}
                    Msg::Stop => stop = true,
                    Msg::Loaded {
                        id,
                        loader,
                        result,
                        tag,
                    } => {
                        if let Some(rec) = st.record_mut(&id) {
                            rec.loader = Some(loader);
                        }
                        self.apply_loaded(&mut st, id, result, tag)
                    }
                    Msg::Destroyed { id, tag } => {
                        if let Some(rec) = st.record_mut(&id) {
                            rec.destroying = false;
                            self.transition(rec, &id, ServableState::Disabled, tag);
                            self.unloads.fetch_add(1, Ordering::Relaxed);
                            if let Some(loader) = rec.reload.take() {
                                *rec = Record::new(loader);
                            }
                        }
                    }
                }
            }
            if stop {
                return;
            }
            self.manage_step(&mut st);
        }
    }

    fn apply_loaded(
        &self,
        st: &mut State,
        id: ServableId,
        result: Result<Box<Servable>, LoadError>,
        tag: &str,
    ) {
        let notify = self.tx.clone();
        let Some(rec) = st.record_mut(&id) else {
            warn!("{id}: load finished for an unknown record");
            return;
        };
        match result {
            Ok(payload) => {
                rec.entry = Some(Arc::new(Entry::new(id.clone(), payload, notify)));
                self.transition(rec, &id, ServableState::Ready, tag);
                self.loads.fetch_add(1, Ordering::Relaxed);
                st.dirty = true;
            }
            Err(e) => {
                warn!("{id}: load failed: {e}");
                rec.loader = None;
                self.transition(rec, &id, ServableState::Error(e.message), tag);
                self.load_failures.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    fn manage_step(&self, st: &mut State) {
        // Newly ready versions become visible before any unload decision.
        if st.dirty {
            self.publish(st);
        }

        let policy = self.config.policy;
        for (name, records) in st.servables.iter_mut() {
            loop {
                if records.values().any(|r| r.state == ServableState::Loading) {
                    break;
                }
                let views: Vec<VersionView> = records
                    .iter()
                    .map(|(&v, r)| VersionView::new(v, r.state.clone(), r.is_aspired))
                    .collect();
                match policy_next_action(&views, policy) {
                    PolicyAction::None => break,
                    PolicyAction::Load(version) => {
                        let id = ServableId::new(name.clone(), version);
                        let rec = records.get_mut(&version).expect("policy picked a record");
                        let mut loader = rec.loader.take().expect("new record has a loader");
                        self.transition(rec, &id, ServableState::Loading, executor::MANAGER);
                        let tx = self.tx.clone();
                        self.load_pool.execute(move || {
                            let result = run_load(&id, loader.as_mut());
                            let _ = tx.send(Msg::Loaded {
                                id,
                                loader,
                                result,
                                tag: executor::current_tag(),
                            });
                        });
                        break;
                    }
                    PolicyAction::Unload(version) => {
                        let id = ServableId::new(name.clone(), version);
                        let rec = records.get_mut(&version).expect("policy picked a record");
                        if let Some(entry) = &rec.entry {
                            entry.unloading.store(true, Ordering::Release);
                        }
                        self.transition(rec, &id, ServableState::Unloading, executor::MANAGER);
                        st.dirty = true;
                    }
                }
            }
        }

        if st.dirty {
            self.publish(st);
        }
        self.drain(st);
    }

    /// Starts destruction of every unloading payload nobody holds any more.
    fn drain(&self, st: &mut State) {
        for (name, records) in st.servables.iter_mut() {
            for (&version, rec) in records.iter_mut() {
                if rec.state != ServableState::Unloading || rec.destroying {
                    continue;
                }
                let Some(arc) = rec.entry.take() else { continue };
                match Arc::try_unwrap(arc) {
                    Ok(entry) => {
                        rec.destroying = true;
                        let id = ServableId::new(name.clone(), version);
                        self.dispatch_destroy(id, rec.loader.take(), entry);
                    }
                    Err(arc) => rec.entry = Some(arc),
                }
            }
        }
    }

    fn dispatch_destroy(&self, id: ServableId, loader: Option<Box<dyn Loader>>, entry: Entry) {
        let tx = self.tx.clone();
        let trim = self.config.allocator_trim_hook.clone();
        self.load_pool.execute(move || {
            let payload = entry.payload;
            match loader {
                Some(mut loader) => loader.unload(payload),
                None => drop(payload),
            }
            if let Some(trim) = trim {
                trim(&id);
            }
            let _ = tx.send(Msg::Destroyed {
                id,
                tag: executor::current_tag(),
            });
        });
    }

    fn publish(&self, st: &mut State) {
        let mut by_name = HashMap::new();
        for (name, records) in &st.servables {
            let entries: Vec<Arc<Entry>> = records
                .values()
                .filter(|r| r.state == ServableState::Ready)
                .filter_map(|r| r.entry.clone())
                .collect();
            if !entries.is_empty() {
                by_name.insert(name.clone(), entries);
            }
        }
        st.epoch += 1;
        st.dirty = false;
        if let Some(hook) = &self.config.on_publish {
            hook(st.epoch);
        }
        self.snapshot
            .store(Arc::new(ServableMapSnapshot::new(st.epoch, by_name)));
    }
}
