//! Hot-swap stress runs against the manager, shared by the availability,
//! resource-preservation and deferred-destruction checks.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use modelserve_core::executor;
use modelserve_core::manager::{HandleError, VersionSpec};
use modelserve_core::{
    AspiredVersionList, AspiredVersionsManager, AspiredVersionsSink, EventBus, LoadError, Loader,
    ManagerConfig, Servable, ServableState, StateEvent, VersionPolicy,
};

use crate::Outcome;

const NAME: &str = "m";

type DropLog = Arc<Mutex<Vec<&'static str>>>;

struct Payload {
    live: Arc<AtomicUsize>,
    drops: DropLog,
}

impl Drop for Payload {
    fn drop(&mut self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
        self.drops.lock().unwrap().push(executor::current_tag());
    }
}

struct CountingLoader {
    delay: Duration,
    live: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    drops: DropLog,
}

impl Loader for CountingLoader {
    fn estimate_memory(&self) -> u64 {
        1
    }

    fn load(&mut self) -> Result<Box<Servable>, LoadError> {
        thread::sleep(self.delay);
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        Ok(Box::new(Payload {
            live: Arc::clone(&self.live),
            drops: Arc::clone(&self.drops),
        }))
    }
}

#[derive(Debug, Clone)]
pub struct SwapRun {
    pub policy: VersionPolicy,
    pub swaps: u64,
    pub completed_swaps: u64,
    pub acquisitions: u64,
    pub not_found: u64,
    pub other_errors: u64,
    pub events: Vec<StateEvent>,
    /// Executor tag of the thread that dropped each payload.
    pub drop_tags: Vec<&'static str>,
    pub peak_live_payloads: usize,
    pub elapsed: Duration,
    pub clean_shutdown: bool,
}

/// Starts at version 1, then swaps to 2, 3, ... while `readers` inference
/// threads acquire `Latest` in a loop. Every eighth handle is held briefly
/// so that releases regularly land on reader threads.
pub fn swap_run(policy: VersionPolicy, readers: usize, swaps: u64, load_delay: Duration) -> SwapRun {
    let started = Instant::now();
    let events = Arc::new(EventBus::recording());
    let config = ManagerConfig {
        manage_interval: Duration::from_millis(2),
        ..ManagerConfig::default().with_policy(policy)
    };
    let manager = Arc::new(AspiredVersionsManager::with_event_bus(config, Arc::clone(&events)));
    manager.start();
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let drops: DropLog = Arc::default();
    let aspire = |v: u64| {
        let loader: Box<dyn Loader> = Box::new(CountingLoader {
            delay: load_delay,
            live: Arc::clone(&live),
            peak: Arc::clone(&peak),
            drops: Arc::clone(&drops),
        });
        manager.set_aspired_versions(AspiredVersionList::from_pairs(NAME, [(v, loader)]).unwrap());
    };
    let settled = |v: u64| {
        manager.wait_until(Duration::from_secs(10), |m| {
            m.snapshot().versions(NAME) == [v] && m.is_quiescent()
        })
    };

    aspire(1);
    let mut completed = u64::from(settled(1));

    let stop = Arc::new(AtomicBool::new(false));
    let acquisitions = Arc::new(AtomicU64::new(0));
    let not_found = Arc::new(AtomicU64::new(0));
    let other = Arc::new(AtomicU64::new(0));
    let workers: Vec<_> = (0..readers)
        .map(|_| {
            let (m, stop) = (Arc::clone(&manager), Arc::clone(&stop));
            let (acq, nf, other) = (Arc::clone(&acquisitions), Arc::clone(&not_found), Arc::clone(&other));
            thread::spawn(move || {
                executor::set_current_tag(executor::INFERENCE);
                let mut i = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    i += 1;
                    match m.get_handle(NAME, VersionSpec::Latest) {
                        Ok(h) => {
                            std::hint::black_box(h.get::<Payload>().is_some());
                            if i % 8 == 0 {
                                let until = Instant::now() + Duration::from_micros(50);
                                while Instant::now() < until {
                                    std::hint::spin_loop();
                                }
                            }
                            drop(h);
                        }
                        Err(HandleError::NotFound(_)) => {
                            nf.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(_) => {
                            other.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    acq.fetch_add(1, Ordering::Relaxed);
                    if i % 64 == 0 {
                        thread::yield_now();
                    }
                }
            })
        })
        .collect();

    for v in 2..=swaps + 1 {
        aspire(v);
        if settled(v) {
            completed += 1;
        }
    }
    stop.store(true, Ordering::Relaxed);
    for w in workers {
        let _ = w.join();
    }
    let clean_shutdown = manager.shutdown(Duration::from_secs(10));
    let drop_tags = drops.lock().unwrap().clone();
    SwapRun {
        policy,
        swaps,
        // The initial load is not a swap.
        completed_swaps: completed.saturating_sub(1),
        acquisitions: acquisitions.load(Ordering::Relaxed),
        not_found: not_found.load(Ordering::Relaxed),
        other_errors: other.load(Ordering::Relaxed),
        events: events.recorded(),
        drop_tags,
        peak_live_payloads: peak.load(Ordering::SeqCst),
        elapsed: started.elapsed(),
        clean_shutdown,
    }
}

/// Smallest number of `Ready` versions of `name` after any event, counted
/// from the first time a version became `Ready` up to event index `until`
/// (exclusive).
pub fn min_ready_during(events: &[StateEvent], name: &str, until: usize) -> usize {
    let mut ready = BTreeSet::new();
    let mut seen_ready = false;
    let mut min = usize::MAX;
    for ev in events[..until].iter().filter(|e| e.id.name == name) {
        if ev.to == ServableState::Ready {
            ready.insert(ev.id.version);
            seen_ready = true;
        } else {
            ready.remove(&ev.id.version);
        }
        if seen_ready {
            min = min.min(ready.len());
        }
    }
    if seen_ready {
        min
    } else {
        0
    }
}

/// Largest number of versions of `name` simultaneously loading, ready or
/// unloading (that is, holding or building a payload).
pub fn max_resident(events: &[StateEvent], name: &str) -> usize {
    let mut resident = BTreeSet::new();
    let mut max = 0;
    for ev in events.iter().filter(|e| e.id.name == name) {
        match ev.to {
            ServableState::Loading | ServableState::Ready | ServableState::Unloading => {
                resident.insert(ev.id.version);
            }
            _ => {
                resident.remove(&ev.id.version);
            }
        }
        max = max.max(resident.len());
    }
    max
}

/// Index of the first event caused by the final teardown: the unload of
/// the last version.
fn teardown_start(run: &SwapRun) -> usize {
    let last = run.swaps + 1;
    run.events
        .iter()
        .position(|e| e.id.version == last && e.to == ServableState::Unloading)
        .unwrap_or(run.events.len())
}

pub fn check_availability(run: &SwapRun) -> Outcome {
    let min_ready = min_ready_during(&run.events, NAME, teardown_start(run));
    let passed = run.not_found == 0
        && run.other_errors == 0
        && run.completed_swaps == run.swaps
        && min_ready >= 1
        && run.elapsed < Duration::from_secs(60);
    Outcome::new(
        passed,
        format!(
            "{} swaps done of {}, {} acquisitions, {} NotFound, {} other failures, min Ready {min_ready}, {:.1}s",
            run.completed_swaps,
            run.swaps,
            run.acquisitions,
            run.not_found,
            run.other_errors,
            run.elapsed.as_secs_f64()
        ),
    )
}

pub fn check_resource_preserving(run: &SwapRun) -> Outcome {
    let resident = max_resident(&run.events, NAME);
    let passed = resident <= 1
        && run.peak_live_payloads <= 1
        && run.not_found > 0
        && run.other_errors == 0
        && run.completed_swaps == run.swaps;
    Outcome::new(
        passed,
        format!(
            "max resident versions {resident}, peak live payloads {}, {} transient NotFound of {} acquisitions, {} swaps done",
            run.peak_live_payloads, run.not_found, run.acquisitions, run.completed_swaps
        ),
    )
}

pub fn check_deferred_destruction(runs: &[&SwapRun]) -> Outcome {
    let allowed = [executor::MANAGER, executor::LOAD];
    let mut drops = 0usize;
    let mut bad_drops = 0usize;
    let mut disabled = 0usize;
    let mut bad_events = 0usize;
    let mut unloads_expected = 0usize;
    for run in runs {
        drops += run.drop_tags.len();
        bad_drops += run.drop_tags.iter().filter(|t| !allowed.contains(t)).count();
        for ev in run.events.iter().filter(|e| e.to == ServableState::Disabled) {
            disabled += 1;
            if !allowed.contains(&ev.executor_tag.as_str()) {
                bad_events += 1;
            }
        }
        unloads_expected += run.swaps as usize + 1;
    }
    let passed = bad_drops == 0 && bad_events == 0 && drops == unloads_expected && disabled == drops;
    Outcome::new(
        passed,
        format!(
            "{drops} payload drops ({bad_drops} off manager/load threads), {disabled} Disabled events ({bad_events} off manager/load threads), {unloads_expected} expected"
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use modelserve_core::ServableId;
    use ServableState::*;

    fn ev(v: u64, from: ServableState, to: ServableState) -> StateEvent {
        StateEvent {
            id: ServableId::new(NAME, v),
            from,
            to,
            timestamp_ns: 0,
            executor_tag: "manager".into(),
        }
    }

    #[test]
    fn ready_and_resident_counting() {
        let overlap = vec![
            ev(1, New, Loading),
            ev(1, Loading, Ready),
            ev(2, New, Loading),
            ev(2, Loading, Ready),
            ev(1, Ready, Unloading),
            ev(1, Unloading, Disabled),
        ];
        assert_eq!(min_ready_during(&overlap, NAME, overlap.len()), 1);
        assert_eq!(max_resident(&overlap, NAME), 2);

        let gap = vec![
            ev(1, New, Loading),
            ev(1, Loading, Ready),
            ev(1, Ready, Unloading),
            ev(1, Unloading, Disabled),
            ev(2, New, Loading),
            ev(2, Loading, Ready),
        ];
        assert_eq!(min_ready_during(&gap, NAME, gap.len()), 0);
        assert_eq!(max_resident(&gap, NAME), 1);
        assert_eq!(min_ready_during(&[], NAME, 0), 0);
    }
}
