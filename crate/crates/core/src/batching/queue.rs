use std::collections::VecDeque;

use super::{BatchError, BatchingConfig};
use crate::servable::ServableId;

/// A group of tasks executed together.
#[derive(Debug)]
pub struct Batch<T> {
    tasks: Vec<T>,
    sizes: Vec<usize>,
    size: usize,
    opened_ns: u64,
    closed_ns: Option<u64>,
}

impl<T> Batch<T> {
    fn open(now_ns: u64) -> Self {
        Self {
            tasks: Vec::new(),
            sizes: Vec::new(),
            size: 0,
            opened_ns: now_ns,
            closed_ns: None,
        }
    }

    /// Total size of the tasks in the batch.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn tasks(&self) -> &[T] {
        &self.tasks
    }

    pub fn into_tasks(self) -> Vec<T> {
        self.tasks
    }

    pub fn opened_ns(&self) -> u64 {
        self.opened_ns
    }

    pub fn closed_ns(&self) -> Option<u64> {
        self.closed_ns
    }
}

/// Single-threaded batching state for one servable version, driven by an
/// external clock. The shared scheduler wraps one of these per queue.
#[derive(Debug)]
pub struct BatchQueue<T> {
    key: ServableId,
    max_batch_size: usize,
    timeout_ns: u64,
    max_enqueued_batches: usize,
    open: Option<Batch<T>>,
    closed: VecDeque<Batch<T>>,
}

impl<T> BatchQueue<T> {
    pub fn new(key: ServableId, config: &BatchingConfig) -> Self {
        Self {
            key,
            max_batch_size: config.max_batch_size,
            timeout_ns: config.batch_timeout().as_nanos() as u64,
            max_enqueued_batches: config.max_enqueued_batches,
            open: None,
            closed: VecDeque::new(),
        }
    }

    pub fn key(&self) -> &ServableId {
        &self.key
    }

    pub fn max_batch_size(&self) -> usize {
        self.max_batch_size
    }

    /// Adds a task of `size` items at time `now_ns`.
    ///
    /// The open batch is closed first if the task would overflow it, and
    /// closed right after if the task fills it exactly.
    pub fn enqueue(&mut self, size: usize, task: T, now_ns: u64) -> Result<(), BatchError> {
        if size == 0 {
            return Err(BatchError::EmptyTask);
        }
        if size > self.max_batch_size {
            return Err(BatchError::TaskTooLarge {
                size,
                max: self.max_batch_size,
            });
        }
        let open_size = self.open.as_ref().map_or(0, |b| b.size);
        if open_size + size > self.max_batch_size {
            if self.closed.len() >= self.max_enqueued_batches {
                return Err(BatchError::QueueFull);
            }
            self.close_open(now_ns);
        }
        let batch = self.open.get_or_insert_with(|| Batch::open(now_ns));
        batch.tasks.push(task);
        batch.sizes.push(size);
        batch.size += size;
        if batch.size == self.max_batch_size && self.closed.len() < self.max_enqueued_batches {
            self.close_open(now_ns);
        }
        Ok(())
    }

    /// Closes the open batch if its timeout has passed. Returns whether it
    /// closed.
    pub fn tick(&mut self, now_ns: u64) -> bool {
        match self.deadline_ns() {
            Some(deadline)
                if now_ns >= deadline && self.closed.len() < self.max_enqueued_batches =>
            {
                self.close_open(now_ns);
                true
            }
            _ => false,
        }
    }

    /// Closes the open batch regardless of size, timeout and capacity.
    pub fn flush(&mut self, now_ns: u64) {
        self.close_open(now_ns);
    }

    /// When the open batch times out, if there is one.
    pub fn deadline_ns(&self) -> Option<u64> {
        self.open
            .as_ref()
            .map(|b| b.opened_ns.saturating_add(self.timeout_ns))
    }

    pub fn pop(&mut self) -> Option<Batch<T>> {
        self.closed.pop_front()
    }

    pub fn closed_len(&self) -> usize {
        self.closed.len()
    }

    pub fn open_size(&self) -> usize {
        self.open.as_ref().map_or(0, |b| b.size)
    }

    pub fn is_idle(&self) -> bool {
        self.open.is_none() && self.closed.is_empty()
    }

    fn close_open(&mut self, now_ns: u64) {
        if let Some(mut batch) = self.open.take() {
            batch.closed_ns = Some(now_ns);
            self.closed.push_back(batch);
        }
    }
}
