//! Batching throughput against a synthetic accelerator, and round-robin
//! fairness between saturated queues.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use modelserve_core::batching::{batched_run, BatchError, BatchingConfig, SharedBatchScheduler};
use modelserve_core::models::AffineModel;
use modelserve_core::ServableId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

type Rows = Vec<Vec<f64>>;

/// One device running one invocation at a time, each costing
/// `fixed + per_row * rows`.
pub struct SyntheticDevice {
    model: AffineModel,
    busy: Mutex<()>,
    fixed: Duration,
    per_row: Duration,
    invocations: AtomicU64,
}

impl SyntheticDevice {
    pub fn new(model: AffineModel, fixed: Duration, per_row: Duration) -> Self {
        Self {
            model,
            busy: Mutex::new(()),
            fixed,
            per_row,
            invocations: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &AffineModel {
        &self.model
    }

    pub fn run(&self, rows: &[Vec<f64>]) -> Rows {
        let _device = self.busy.lock().unwrap();
        self.invocations.fetch_add(1, Ordering::Relaxed);
        thread::sleep(self.fixed + self.per_row * rows.len() as u32);
        self.model.predict(rows).expect("rows match the model width")
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }
}

fn model(in_dim: usize, out_dim: usize, seed: u64) -> AffineModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..in_dim).map(|i| format!("f{i}")).collect();
    let weights = (0..out_dim)
        .map(|_| (0..in_dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let bias = (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    AffineModel::new(features, weights, bias, None).unwrap()
}

#[derive(Debug, Clone)]
pub struct ThroughputRun {
    pub rows: u64,
    pub elapsed: Duration,
    pub mismatches: u64,
    pub errors: u64,
    pub invocations: u64,
}

impl ThroughputRun {
    pub fn rows_per_sec(&self) -> f64 {
        self.rows as f64 / self.elapsed.as_secs_f64()
    }
}

/// `clients` threads each send one-row requests back to back for
/// `duration`, either straight to the device or through a batch queue.
/// Every result is compared bit for bit with a one-row prediction made
/// outside the device.
pub fn throughput(batched: Option<&BatchingConfig>, clients: usize, duration: Duration) -> ThroughputRun {
    let device = Arc::new(SyntheticDevice::new(
        model(8, 3, 11),
        Duration::from_millis(1),
        Duration::from_micros(10),
    ));
    let scheduler = SharedBatchScheduler::<Rows, Rows>::new(1);
    let key = ServableId::new("synthetic", 1);
    let queue = batched.map(|config| {
        let d = Arc::clone(&device);
        scheduler
            .register_queue(
                key.clone(),
                config,
                Arc::new(move |tasks: Vec<Rows>| {
                    batched_run(|merged| Ok(d.run(&merged)), tasks, None)
                }),
            )
            .expect("fresh queue")
    });

    let stop = Arc::new(AtomicBool::new(false));
    let started = Instant::now();
    let workers: Vec<_> = (0..clients)
        .map(|c| {
            let (device, queue, stop) = (Arc::clone(&device), queue.clone(), Arc::clone(&stop));
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + c as u64);
                let (mut rows, mut mismatches, mut errors) = (0u64, 0u64, 0u64);
                while !stop.load(Ordering::Relaxed) {
                    let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect();
                    let got: Result<Rows, BatchError> = match &queue {
                        Some(q) => q.enqueue(1, vec![row.clone()]).and_then(|p| p.wait()),
                        None => Ok(device.run(&[row.clone()])),
                    };
                    match got {
                        Ok(out) => {
                            let want = device.model().predict(&[row]).unwrap();
                            let same = out.len() == 1
                                && out[0].len() == want[0].len()
                                && out[0].iter().zip(&want[0]).all(|(a, b)| a.to_bits() == b.to_bits());
                            if !same {
                                mismatches += 1;
                            }
                            rows += 1;
                        }
                        Err(_) => errors += 1,
                    }
                }
                (rows, mismatches, errors)
            })
        })
        .collect();
    thread::sleep(duration);
    stop.store(true, Ordering::Relaxed);
    let mut run = ThroughputRun {
        rows: 0,
        elapsed: Duration::ZERO,
        mismatches: 0,
        errors: 0,
        invocations: 0,
    };
    for w in workers {
        let (r, m, e) = w.join().unwrap();
        run.rows += r;
        run.mismatches += m;
        run.errors += e;
    }
    run.elapsed = started.elapsed();
    run.invocations = device.invocations();
    run
}

pub fn check_throughput() -> Outcome {
    let started = Instant::now();
    let config = BatchingConfig {
        max_batch_size: 32,
        batch_timeout_micros: 2000,
        max_enqueued_batches: 64,
        allowed_batch_sizes: None,
        num_batch_threads: 1,
    };
    let window = Duration::from_secs(3);
    let plain = throughput(None, 64, window);
    let batched = throughput(Some(&config), 64, window);
    let speedup = batched.rows_per_sec() / plain.rows_per_sec();
    let passed = speedup >= 10.0
        && batched.mismatches == 0
        && plain.mismatches == 0
        && batched.errors == 0
        && started.elapsed() < Duration::from_secs(120);
    Outcome::new(
        passed,
        format!(
            "unbatched {:.0} rows/s, batched {:.0} rows/s ({:.1} rows per invocation), speedup {speedup:.1}x, {} mismatches of {} batched rows, {} errors",
            plain.rows_per_sec(),
            batched.rows_per_sec(),
            batched.rows as f64 / batched.invocations.max(1) as f64,
            batched.mismatches,
            batched.rows,
            batched.errors
        ),
    )
}

/// Dispatch order of `batches` batches from two queues kept full from the
/// first dispatch on.
pub fn fairness_order(batches: usize) -> Vec<usize> {
    let order = Arc::new(Mutex::new(Vec::new()));
    let keys = [ServableId::new("a", 1), ServableId::new("b", 1)];
    let hook = {
        let (order, keys) = (order.clone(), keys.clone());
        Arc::new(move |key: &ServableId, _tasks: usize| {
            let idx = keys.iter().position(|k| k == key).expect("known queue");
            order.lock().unwrap().push(idx);
        })
    };
    let scheduler = SharedBatchScheduler::<u32, u32>::with_dispatch_hook(1, Some(hook));
    let (gate_tx, gate_rx) = latch();
    let config = BatchingConfig {
        max_batch_size: 4,
        batch_timeout_micros: 1_000_000,
        max_enqueued_batches: batches + 8,
        allowed_batch_sizes: None,
        num_batch_threads: 1,
    };
    let queues: Vec<_> = keys
        .iter()
        .map(|k| {
            let gate = gate_rx.clone();
            scheduler
                .register_queue(
                    k.clone(),
                    &config,
                    Arc::new(move |tasks: Vec<u32>| {
                        gate.wait();
                        tasks.into_iter().map(Ok).collect()
                    }),
                )
                .unwrap()
        })
        .collect();

    // The first batch occupies the only worker until the gate opens, so
    // both queues are full before any choice between them is made.
    let per_queue = batches / 2 + 4;
    let mut pending = Vec::new();
    for i in 0..per_queue {
        for q in &queues {
            pending.push(q.enqueue(4, i as u32).expect("capacity for every batch"));
        }
    }
    gate_tx.open();
    for p in pending {
        let _ = p.wait();
    }
    let order = order.lock().unwrap().clone();
    order.into_iter().take(batches).collect()
}

/// Largest per-queue count difference over every window of `width`
/// consecutive dispatches.
pub fn max_window_imbalance(order: &[usize], width: usize) -> usize {
    order
        .windows(width)
        .map(|w| {
            let a = w.iter().filter(|&&q| q == 0).count();
            a.abs_diff(w.len() - a)
        })
        .max()
        .unwrap_or(0)
}

pub fn check_fairness() -> Outcome {
    let order = fairness_order(1000);
    let worst = max_window_imbalance(&order, 100);
    let passed = order.len() == 1000 && worst <= 1;
    Outcome::new(
        passed,
        format!(
            "{} batches dispatched, worst per-queue difference in a window of 100: {worst}",
            order.len()
        ),
    )
}

/// A one-shot latch: every `wait` blocks until `open`.
fn latch() -> (Latch, Latch) {
    let l = Latch(Arc::new((Mutex::new(false), std::sync::Condvar::new())));
    (l.clone(), l)
}

#[derive(Clone)]
struct Latch(Arc<(Mutex<bool>, std::sync::Condvar)>);

impl Latch {
    fn open(&self) {
        *self.0 .0.lock().unwrap() = true;
        self.0 .1.notify_all();
    }

    fn wait(&self) {
        let mut open = self.0 .0.lock().unwrap();
        while !*open {
            open = self.0 .1.wait(open).unwrap();
        }
    }
}
