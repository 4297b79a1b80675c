//! Reader latency while the snapshot writer is stalled, plus a
//! single-thread acquisition microbenchmark.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use modelserve_core::manager::VersionSpec;
use modelserve_core::{
    AspiredVersionList, AspiredVersionsManager, AspiredVersionsSink, LoadError, Loader,
    ManagerConfig, Servable,
};

use crate::{ms, percentile, Outcome};

struct Unit;

impl Loader for Unit {
    fn estimate_memory(&self) -> u64 {
        0
    }

    fn load(&mut self) -> Result<Box<Servable>, LoadError> {
        Ok(Box::new(7u64))
    }
}

fn list(versions: &[u64]) -> AspiredVersionList<Box<dyn Loader>> {
    AspiredVersionList::from_pairs(
        "m",
        versions.iter().map(|&v| (v, Box::new(Unit) as Box<dyn Loader>)),
    )
    .unwrap()
}

#[derive(Debug, Clone)]
pub struct StallReport {
    pub samples: usize,
    pub p99: Duration,
    pub max: Duration,
    pub stall: Duration,
    pub failures: usize,
}

/// Holds the publishing thread inside the publish hook for `stall` while
/// `readers` threads time every `get_handle`.
pub fn stalled_writer(readers: usize, stall: Duration) -> StallReport {
    let arm = Arc::new(AtomicBool::new(false));
    let stalling = Arc::new(AtomicBool::new(false));
    let stalled_for = Arc::new(Mutex::new(Duration::ZERO));
    let hook = {
        let (arm, stalling, stalled_for) = (arm.clone(), stalling.clone(), stalled_for.clone());
        Arc::new(move |_epoch: u64| {
            if arm.swap(false, Ordering::SeqCst) {
                let t = Instant::now();
                stalling.store(true, Ordering::SeqCst);
                thread::sleep(stall);
                stalling.store(false, Ordering::SeqCst);
                *stalled_for.lock().unwrap() = t.elapsed();
            }
        })
    };
    let manager = Arc::new(AspiredVersionsManager::new(ManagerConfig {
        manage_interval: Duration::from_millis(2),
        on_publish: Some(hook),
        ..ManagerConfig::default()
    }));
    manager.start();
    manager.set_aspired_versions(list(&[1]));
    manager.wait_until(Duration::from_secs(5), |m| m.snapshot().versions("m") == [1]);

    let done = Arc::new(AtomicBool::new(false));
    let workers: Vec<_> = (0..readers)
        .map(|_| {
            let (m, stalling, done) = (manager.clone(), stalling.clone(), done.clone());
            thread::spawn(move || {
                let mut samples = Vec::with_capacity(1 << 20);
                let mut failures = 0;
                while !done.load(Ordering::Relaxed) {
                    if !stalling.load(Ordering::Relaxed) {
                        std::hint::spin_loop();
                        thread::yield_now();
                        continue;
                    }
                    let t = Instant::now();
                    let h = m.get_handle("m", VersionSpec::Latest);
                    let took = t.elapsed();
                    match h {
                        Ok(h) => {
                            std::hint::black_box(h.version());
                        }
                        Err(_) => failures += 1,
                    }
                    samples.push(took);
                }
                (samples, failures)
            })
        })
        .collect();

    arm.store(true, Ordering::SeqCst);
    manager.set_aspired_versions(list(&[1, 2]));
    let started = Instant::now();
    while !stalling.load(Ordering::SeqCst) && started.elapsed() < Duration::from_secs(5) {
        thread::sleep(Duration::from_millis(1));
    }
    while stalling.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(5));
    }
    done.store(true, Ordering::SeqCst);
    let mut all = Vec::new();
    let mut failures = 0;
    for w in workers {
        let (s, f) = w.join().unwrap();
        all.extend(s);
        failures += f;
    }
    manager.shutdown(Duration::from_secs(5));
    let max = all.iter().copied().max().unwrap_or_default();
    let stall = *stalled_for.lock().unwrap();
    StallReport {
        samples: all.len(),
        p99: percentile(&mut all, 99.0),
        max,
        stall,
        failures,
    }
}

/// Acquisitions per second of `get_handle` + release on one thread,
/// median of `runs` runs of `iterations` each.
pub fn acquisition_rate(iterations: u64, runs: usize) -> f64 {
    let manager = AspiredVersionsManager::new(ManagerConfig {
        manage_interval: Duration::from_millis(2),
        ..ManagerConfig::default()
    });
    manager.start();
    manager.set_aspired_versions(list(&[1]));
    manager.wait_until(Duration::from_secs(5), |m| m.snapshot().versions("m") == [1]);
    let mut rates: Vec<f64> = (0..runs)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..iterations {
                let h = manager.get_handle("m", VersionSpec::Latest).expect("ready");
                std::hint::black_box(h.version());
            }
            iterations as f64 / t.elapsed().as_secs_f64()
        })
        .collect();
    manager.shutdown(Duration::from_secs(5));
    rates.sort_by(f64::total_cmp);
    rates[rates.len() / 2]
}

pub fn check() -> Outcome {
    let stall = Duration::from_secs(1);
    let r = stalled_writer(4, stall);
    let rate = acquisition_rate(2_000_000, 3);
    let passed = r.stall >= stall
        && r.samples >= 1000
        && r.failures == 0
        && r.p99 < Duration::from_millis(1)
        && rate > 1e6;
    Outcome::new(
        passed,
        format!(
            "writer stalled {}, {} reads during stall, p99 {} (max {}), {} failures; {:.2}M acquisitions/s on one thread",
            ms(r.stall),
            r.samples,
            ms(r.p99),
            ms(r.max),
            r.failures,
            rate / 1e6
        ),
    )
}
