use std::collections::HashMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};

use super::{round_robin_next, BatchError, BatchQueue, BatchingConfig};
use crate::events::monotonic_nanos;
use crate::executor;
use crate::servable::ServableId;

/// Runs the payloads of one batch, in order, and returns one result per
/// payload.
pub type BatchProcessor<P, R> = Arc<dyn Fn(Vec<P>) -> Vec<Result<R, BatchError>> + Send + Sync>;

/// Called under the scheduler lock each time a batch is handed to a worker,
/// with the queue key and the batch's task count.
pub type DispatchHook = Arc<dyn Fn(&ServableId, usize) + Send + Sync>;

struct Task<P, R> {
    payload: P,
    done: Sender<Result<R, BatchError>>,
}

/// Completion slot of an enqueued task.
pub struct Pending<R> {
    rx: Receiver<Result<R, BatchError>>,
}

impl<R> Pending<R> {
    pub fn wait(self) -> Result<R, BatchError> {
        self.rx.recv().unwrap_or(Err(BatchError::Cancelled))
    }

    pub fn wait_timeout(self, timeout: Duration) -> Option<Result<R, BatchError>> {
        match self.rx.recv_timeout(timeout) {
            Ok(r) => Some(r),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => None,
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => {
                Some(Err(BatchError::Cancelled))
            }
        }
    }
}

impl<R> fmt::Debug for Pending<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Pending")
    }
}

struct Slot<P, R> {
    key: ServableId,
    queue: Mutex<BatchQueue<Task<P, R>>>,
    closed: AtomicUsize,
    in_flight: AtomicUsize,
    removed: AtomicBool,
    processor: BatchProcessor<P, R>,
}

impl<P, R> Slot<P, R> {
    fn lock(&self) -> MutexGuard<'_, BatchQueue<Task<P, R>>> {
        self.queue.lock().unwrap_or_else(|p| p.into_inner())
    }
}

struct SchedState<P, R> {
    queues: Vec<Arc<Slot<P, R>>>,
    last: Option<usize>,
    shutdown: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SchedulerStats {
    pub batches: u64,
    pub tasks: u64,
    pub items: u64,
    pub rejected: u64,
}

#[derive(Default)]
struct Counters {
    batches: AtomicU64,
    tasks: AtomicU64,
    items: AtomicU64,
    rejected: AtomicU64,
}

struct Inner<P, R> {
    state: Mutex<SchedState<P, R>>,
    cv: Condvar,
    index: RwLock<HashMap<ServableId, Arc<Slot<P, R>>>>,
    on_dispatch: Option<DispatchHook>,
    counters: Counters,
}

impl<P, R> Inner<P, R> {
    fn lock(&self) -> MutexGuard<'_, SchedState<P, R>> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn notify(&self) {
        let _guard = self.lock();
        self.cv.notify_all();
    }
}

/// Direct access to one registered queue, skipping the key lookup.
pub struct QueueHandle<P, R> {
    slot: Arc<Slot<P, R>>,
    inner: Arc<Inner<P, R>>,
}

impl<P, R> Clone for QueueHandle<P, R> {
    fn clone(&self) -> Self {
        Self {
            slot: Arc::clone(&self.slot),
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<P: Send + 'static, R: Send + 'static> QueueHandle<P, R> {
    pub fn key(&self) -> &ServableId {
        &self.slot.key
    }

    pub fn enqueue(&self, size: usize, payload: P) -> Result<Pending<R>, BatchError> {
        enqueue_into(&self.inner, &self.slot, size, payload)
    }
}

fn enqueue_into<P, R>(
    inner: &Inner<P, R>,
    slot: &Slot<P, R>,
    size: usize,
    payload: P,
) -> Result<Pending<R>, BatchError> {
    let (done, rx) = crossbeam_channel::bounded(1);
    let now = monotonic_nanos();
    let task = Task { payload, done };
    let wake = {
        let mut q = slot.lock();
        if slot.removed.load(Ordering::Acquire) {
            return Err(BatchError::UnknownKey(slot.key.to_string()));
        }
        let closed_before = q.closed_len();
        let was_open = q.open_size() > 0;
        if let Err(e) = q.enqueue(size, task, now) {
            inner.counters.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(e);
        }
        slot.closed.store(q.closed_len(), Ordering::Release);
        q.closed_len() > closed_before || !was_open
    };
    if wake {
        inner.notify();
    }
    Ok(Pending { rx })
}

/// A fixed pool of batch threads shared by every registered queue.
///
/// Closed batches are dispatched round-robin across queues; within a queue
/// they run in closing order. Dropping the scheduler flushes and runs
/// whatever is still queued before joining the threads.
pub struct SharedBatchScheduler<P, R> {
    inner: Arc<Inner<P, R>>,
    workers: Vec<JoinHandle<()>>,
}

impl<P: Send + 'static, R: Send + 'static> SharedBatchScheduler<P, R> {
    pub fn new(num_batch_threads: usize) -> Self {
        Self::with_dispatch_hook(num_batch_threads, None)
    }

    pub fn with_dispatch_hook(num_batch_threads: usize, on_dispatch: Option<DispatchHook>) -> Self {
        assert!(num_batch_threads > 0, "scheduler needs at least one thread");
        let inner = Arc::new(Inner {
            state: Mutex::new(SchedState {
                queues: Vec::new(),
                last: None,
                shutdown: false,
            }),
            cv: Condvar::new(),
            index: RwLock::new(HashMap::new()),
            on_dispatch,
            counters: Counters::default(),
        });
        let workers = (0..num_batch_threads)
            .map(|i| {
                let inner = Arc::clone(&inner);
                thread::Builder::new()
                    .name(format!("batch-{i}"))
                    .spawn(move || {
                        executor::set_current_tag(executor::BATCH);
                        worker_loop(&inner);
                    })
                    .expect("spawn batch thread")
            })
            .collect();
        Self { inner, workers }
    }

    pub fn threads(&self) -> usize {
        self.workers.len()
    }

    pub fn register_queue(
        &self,
        key: ServableId,
        config: &BatchingConfig,
        processor: BatchProcessor<P, R>,
    ) -> Result<QueueHandle<P, R>, BatchError> {
        config.validate()?;
        let mut index = self.inner.index.write().unwrap();
        if index.contains_key(&key) {
            return Err(BatchError::DuplicateKey(key.to_string()));
        }
        let slot = Arc::new(Slot {
            queue: Mutex::new(BatchQueue::new(key.clone(), config)),
            key: key.clone(),
            closed: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            removed: AtomicBool::new(false),
            processor,
        });
        index.insert(key, Arc::clone(&slot));
        self.inner.lock().queues.push(Arc::clone(&slot));
        self.inner.cv.notify_all();
        Ok(QueueHandle {
            slot,
            inner: Arc::clone(&self.inner),
        })
    }

    /// Stops accepting tasks for `key`, runs everything already queued for
    /// it (the open batch included), then forgets the queue.
    pub fn remove_queue(&self, key: &ServableId) -> Result<(), BatchError> {
        let slot = self
            .inner
            .index
            .write()
            .unwrap()
            .remove(key)
            .ok_or_else(|| BatchError::UnknownKey(key.to_string()))?;
        {
            let mut q = slot.lock();
            slot.removed.store(true, Ordering::Release);
            q.flush(monotonic_nanos());
            slot.closed.store(q.closed_len(), Ordering::Release);
        }
        let mut st = self.inner.lock();
        self.inner.cv.notify_all();
        while slot.closed.load(Ordering::Acquire) > 0 || slot.in_flight.load(Ordering::Acquire) > 0
        {
            st = self.inner.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        st.queues.retain(|s| !Arc::ptr_eq(s, &slot));
        st.last = None;
        Ok(())
    }

    pub fn queue(&self, key: &ServableId) -> Option<QueueHandle<P, R>> {
        self.inner
            .index
            .read()
            .unwrap()
            .get(key)
            .map(|slot| QueueHandle {
                slot: Arc::clone(slot),
                inner: Arc::clone(&self.inner),
            })
    }

    pub fn keys(&self) -> Vec<ServableId> {
        let mut keys: Vec<ServableId> = self.inner.index.read().unwrap().keys().cloned().collect();
        keys.sort();
        keys
    }

    pub fn enqueue(&self, key: &ServableId, size: usize, payload: P) -> Result<Pending<R>, BatchError> {
        let slot = self
            .inner
            .index
            .read()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| BatchError::UnknownKey(key.to_string()))?;
        enqueue_into(&self.inner, &slot, size, payload)
    }

    pub fn stats(&self) -> SchedulerStats {
        let c = &self.inner.counters;
        SchedulerStats {
            batches: c.batches.load(Ordering::Relaxed),
            tasks: c.tasks.load(Ordering::Relaxed),
            items: c.items.load(Ordering::Relaxed),
            rejected: c.rejected.load(Ordering::Relaxed),
        }
    }
}

impl<P, R> Drop for SharedBatchScheduler<P, R> {
    fn drop(&mut self) {
        {
            let mut st = self.inner.lock();
            let now = monotonic_nanos();
            for slot in &st.queues {
                let mut q = slot.lock();
                q.flush(now);
                slot.closed.store(q.closed_len(), Ordering::Release);
            }
            st.shutdown = true;
            self.inner.cv.notify_all();
        }
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
    }
}

impl<P, R> fmt::Debug for SharedBatchScheduler<P, R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SharedBatchScheduler")
            .field("threads", &self.workers.len())
            .field("queues", &self.inner.index.read().unwrap().len())
            .finish()
    }
}

fn worker_loop<P, R>(inner: &Inner<P, R>) {
    let mut st = inner.lock();
    loop {
        let now = monotonic_nanos();
        let mut next_deadline: Option<u64> = None;
        let mut has_closed = Vec::with_capacity(st.queues.len());
        for slot in &st.queues {
            let mut q = slot.lock();
            q.tick(now);
            slot.closed.store(q.closed_len(), Ordering::Release);
            if let Some(d) = q.deadline_ns() {
                next_deadline = Some(next_deadline.map_or(d, |n| n.min(d)));
            }
            has_closed.push(q.closed_len() > 0);
        }

        if let Some(i) = round_robin_next(&has_closed, st.last) {
            st.last = Some(i);
            let slot = Arc::clone(&st.queues[i]);
            let batch = {
                let mut q = slot.lock();
                let batch = q.pop();
                slot.closed.store(q.closed_len(), Ordering::Release);
                batch
            };
            let Some(batch) = batch else { continue };
            slot.in_flight.fetch_add(1, Ordering::AcqRel);
            if let Some(hook) = &inner.on_dispatch {
                hook(&slot.key, batch.len());
            }
            drop(st);

            inner.counters.batches.fetch_add(1, Ordering::Relaxed);
            inner
                .counters
                .tasks
                .fetch_add(batch.len() as u64, Ordering::Relaxed);
            inner
                .counters
                .items
                .fetch_add(batch.size() as u64, Ordering::Relaxed);
            run_batch(&slot, batch.into_tasks());

            st = inner.lock();
            slot.in_flight.fetch_sub(1, Ordering::AcqRel);
            inner.cv.notify_all();
            continue;
        }

        if st.shutdown {
            return;
        }
        st = match next_deadline {
            Some(deadline) => {
                let wait = Duration::from_nanos(deadline.saturating_sub(now).max(1));
                inner
                    .cv
                    .wait_timeout(st, wait)
                    .unwrap_or_else(|p| p.into_inner())
                    .0
            }
            None => inner.cv.wait(st).unwrap_or_else(|p| p.into_inner()),
        };
    }
}

fn run_batch<P, R>(slot: &Slot<P, R>, tasks: Vec<Task<P, R>>) {
    let mut senders = Vec::with_capacity(tasks.len());
    let mut payloads = Vec::with_capacity(tasks.len());
    for task in tasks {
        senders.push(task.done);
        payloads.push(task.payload);
    }
    let n = senders.len();
    let processor = &slot.processor;
    let results = match catch_unwind(AssertUnwindSafe(|| processor(payloads))) {
        Ok(results) if results.len() == n => results,
        Ok(results) => {
            let e = BatchError::Execution(format!(
                "processor returned {} results for {n} tasks",
                results.len()
            ));
            (0..n).map(|_| Err(e.clone())).collect()
        }
        Err(_) => {
            let e = BatchError::Execution("batch processor panicked".into());
            (0..n).map(|_| Err(e.clone())).collect()
        }
    };
    for (done, result) in senders.into_iter().zip(results) {
        let _ = done.send(result);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn config(max: usize, timeout_ms: u64) -> BatchingConfig {
        BatchingConfig {
            max_batch_size: max,
            batch_timeout_micros: timeout_ms * 1000,
            ..BatchingConfig::default()
        }
    }

    fn doubling() -> BatchProcessor<u32, u32> {
        Arc::new(|xs: Vec<u32>| xs.into_iter().map(|x| Ok(x * 2)).collect())
    }

    #[test]
    fn results_map_to_tasks() {
        let sched = SharedBatchScheduler::new(2);
        let q = sched
            .register_queue(ServableId::new("m", 1), &config(4, 5), doubling())
            .unwrap();
        let pending: Vec<_> = (0..10).map(|i| q.enqueue(1, i).unwrap()).collect();
        let got: Vec<u32> = pending.into_iter().map(|p| p.wait().unwrap()).collect();
        assert_eq!(got, (0..10).map(|i| i * 2).collect::<Vec<_>>());
        assert!(sched.stats().batches >= 3);
    }

    #[test]
    fn lone_task_runs_after_timeout() {
        let sched = SharedBatchScheduler::new(1);
        sched
            .register_queue(ServableId::new("m", 1), &config(4, 20), doubling())
            .unwrap();
        let start = std::time::Instant::now();
        let p = sched.enqueue(&ServableId::new("m", 1), 1, 21).unwrap();
        assert_eq!(p.wait(), Ok(42));
        let waited = start.elapsed();
        assert!(waited >= Duration::from_millis(19), "{waited:?}");
        assert!(waited < Duration::from_millis(500), "{waited:?}");
    }

    #[test]
    fn duplicate_and_unknown_keys() {
        let sched: SharedBatchScheduler<u32, u32> = SharedBatchScheduler::new(1);
        let key = ServableId::new("m", 1);
        sched.register_queue(key.clone(), &config(4, 1), doubling()).unwrap();
        assert!(matches!(
            sched.register_queue(key.clone(), &config(4, 1), doubling()),
            Err(BatchError::DuplicateKey(_))
        ));
        sched.remove_queue(&key).unwrap();
        assert!(matches!(sched.remove_queue(&key), Err(BatchError::UnknownKey(_))));
        assert!(matches!(sched.enqueue(&key, 1, 1), Err(BatchError::UnknownKey(_))));
    }

    #[test]
    fn remove_drains_pending_batches() {
        let gate = Arc::new((Mutex::new(false), Condvar::new()));
        let ran = Arc::new(AtomicU32::new(0));
        let processor: BatchProcessor<u32, u32> = {
            let gate = Arc::clone(&gate);
            let ran = Arc::clone(&ran);
            Arc::new(move |xs: Vec<u32>| {
                let (lock, cv) = &*gate;
                let mut open = lock.lock().unwrap();
                while !*open {
                    open = cv.wait(open).unwrap();
                }
                ran.fetch_add(1, Ordering::SeqCst);
                xs.into_iter().map(Ok).collect()
            })
        };
        let sched = Arc::new(SharedBatchScheduler::new(1));
        let v1 = ServableId::new("m", 1);
        let v2 = ServableId::new("m", 2);
        let q1 = sched.register_queue(v1.clone(), &config(2, 10_000), processor.clone()).unwrap();
        sched.register_queue(v2.clone(), &config(2, 10_000), doubling()).unwrap();
        // The first batch blocks the lone worker; two more wait behind it.
        let pending: Vec<_> = (0..6).map(|i| q1.enqueue(1, i).unwrap()).collect();

        let remover = {
            let sched = Arc::clone(&sched);
            let v1 = v1.clone();
            thread::spawn(move || sched.remove_queue(&v1))
        };
        thread::sleep(Duration::from_millis(50));
        assert!(!remover.is_finished());
        {
            let (lock, cv) = &*gate;
            *lock.lock().unwrap() = true;
            cv.notify_all();
        }
        remover.join().unwrap().unwrap();
        assert_eq!(ran.load(Ordering::SeqCst), 3);
        let got: Vec<u32> = pending.into_iter().map(|p| p.wait().unwrap()).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(sched.keys(), vec![v2.clone()]);
        assert!(matches!(q1.enqueue(1, 0), Err(BatchError::UnknownKey(_))));
        assert_eq!(sched.enqueue(&v2, 2, 5).unwrap().wait(), Ok(10));
    }

    #[test]
    fn errors_and_panics_reach_every_task() {
        let sched: SharedBatchScheduler<u32, u32> = SharedBatchScheduler::new(1);
        let failing: BatchProcessor<u32, u32> =
            Arc::new(|xs: Vec<u32>| vec![Err(BatchError::Execution("nope".into())); xs.len()]);
        let panicking: BatchProcessor<u32, u32> = Arc::new(|_| panic!("kaboom"));
        let a = sched.register_queue(ServableId::new("a", 1), &config(2, 1), failing).unwrap();
        let b = sched.register_queue(ServableId::new("b", 1), &config(2, 1), panicking).unwrap();
        let pa: Vec<_> = (0..2).map(|i| a.enqueue(1, i).unwrap()).collect();
        let pb: Vec<_> = (0..2).map(|i| b.enqueue(1, i).unwrap()).collect();
        for p in pa.into_iter().chain(pb) {
            assert!(matches!(p.wait(), Err(BatchError::Execution(_))));
        }
    }

    #[test]
    fn drop_runs_queued_work() {
        let sched = SharedBatchScheduler::new(1);
        let q = sched
            .register_queue(ServableId::new("m", 1), &config(8, 60_000), doubling())
            .unwrap();
        let p = q.enqueue(1, 4).unwrap();
        drop(sched);
        assert_eq!(p.wait(), Ok(8));
    }

    #[test]
    fn round_robin_alternates_between_saturated_queues() {
        let order = Arc::new(Mutex::new(Vec::new()));
        let hook: DispatchHook = {
            let order = Arc::clone(&order);
            Arc::new(move |key: &ServableId, _| order.lock().unwrap().push(key.name.clone()))
        };
        let sched = SharedBatchScheduler::with_dispatch_hook(1, Some(hook));
        let slow: BatchProcessor<u32, u32> = Arc::new(|xs: Vec<u32>| {
            thread::sleep(Duration::from_micros(200));
            xs.into_iter().map(Ok).collect()
        });
        let cfg = BatchingConfig {
            max_enqueued_batches: 1000,
            ..config(1, 1)
        };
        let a = sched.register_queue(ServableId::new("a", 1), &cfg, slow.clone()).unwrap();
        let b = sched.register_queue(ServableId::new("b", 1), &cfg, slow).unwrap();
        let mut pending = Vec::new();
        for i in 0..100 {
            pending.push(a.enqueue(1, i).unwrap());
            pending.push(b.enqueue(1, i).unwrap());
        }
        for p in pending {
            p.wait().unwrap();
        }
        let order = order.lock().unwrap();
        // Skip the start-up phase before both queues were populated.
        let tail = &order[10..];
        for pair in tail.windows(2) {
            assert_ne!(pair[0], pair[1], "{order:?}");
        }
    }
}
