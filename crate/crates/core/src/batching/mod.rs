//! Cross-request batching.
//!
//! Each servable version gets its own [`BatchQueue`]; a
//! [`SharedBatchScheduler`] closes batches on size or timeout and hands the
//! closed ones, round-robin across queues, to a fixed pool of batch
//! threads. [`batched_run`] is the merge/split wrapper that lets a per-row
//! function execute a whole batch in one call.

mod queue;
mod scheduler;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use queue::{Batch, BatchQueue};
pub use scheduler::{
    BatchProcessor, DispatchHook, Pending, QueueHandle, SchedulerStats, SharedBatchScheduler,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BatchError {
    #[error("batch queue is full")]
    QueueFull,
    #[error("task of size {size} exceeds max_batch_size {max}")]
    TaskTooLarge { size: usize, max: usize },
    #[error("task has size zero")]
    EmptyTask,
    #[error("batch queue {0} is already registered")]
    DuplicateKey(String),
    #[error("no batch queue registered for {0}")]
    UnknownKey(String),
    #[error("batch execution failed: {0}")]
    Execution(String),
    #[error("task was dropped before its batch ran")]
    Cancelled,
    #[error("invalid batching config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingConfig {
    pub max_batch_size: usize,
    pub batch_timeout_micros: u64,
    pub max_enqueued_batches: usize,
    pub allowed_batch_sizes: Option<Vec<usize>>,
    pub num_batch_threads: usize,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        Self {
            max_batch_size: 32,
            batch_timeout_micros: 1000,
            max_enqueued_batches: 64,
            allowed_batch_sizes: None,
            num_batch_threads: 4,
        }
    }
}

impl BatchingConfig {
    pub fn batch_timeout(&self) -> Duration {
        Duration::from_micros(self.batch_timeout_micros)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, BatchError> {
        let config: Self =
            toml::from_str(text).map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        let bad = |msg: &str| Err(BatchError::InvalidConfig(msg.to_string()));
        if self.max_batch_size == 0 {
            return bad("max_batch_size must be positive");
        }
        if self.max_enqueued_batches == 0 {
            return bad("max_enqueued_batches must be positive");
        }
        if self.num_batch_threads == 0 {
            return bad("num_batch_threads must be positive");
        }
        if let Some(allowed) = &self.allowed_batch_sizes {
            if allowed.is_empty() || allowed[0] == 0 {
                return bad("allowed_batch_sizes must be non-empty and positive");
            }
            if allowed.windows(2).any(|w| w[0] >= w[1]) {
                return bad("allowed_batch_sizes must be strictly ascending");
            }
            if allowed.last() != Some(&self.max_batch_size) {
                return bad("allowed_batch_sizes must end at max_batch_size");
            }
        }
        Ok(())
    }
}

/// Index of the first queue after `last` (cyclically) whose flag is set.
/// With no previous pick the scan starts at index 0.
pub fn round_robin_next(has_closed: &[bool], last: Option<usize>) -> Option<usize> {
    let n = has_closed.len();
    if n == 0 {
        return None;
    }
    let start = last.map_or(0, |l| (l + 1) % n);
    (0..n).map(|k| (start + k) % n).find(|&i| has_closed[i])
}

/// Smallest allowed size that fits `batch_size`.
///
/// # Panics
/// If `batch_size` exceeds the largest allowed size.
pub fn pad_to_allowed(batch_size: usize, allowed: &[usize]) -> usize {
    *allowed
        .iter()
        .find(|&&a| a >= batch_size)
        .unwrap_or_else(|| panic!("batch size {batch_size} exceeds allowed sizes {allowed:?}"))
}

/// Concatenates the tasks' rows, calls `run` once on the merged batch and
/// splits the output rows back by task.
///
/// With `pad` set to `(target, filler)` the merged input is extended with
/// copies of `filler` up to `target` rows; their outputs are discarded.
/// An error from `run`, or an output of the wrong length, is delivered to
/// every task.
pub fn batched_run<I: Clone, O>(
    run: impl FnOnce(Vec<I>) -> Result<Vec<O>, BatchError>,
    tasks: Vec<Vec<I>>,
    pad: Option<(usize, I)>,
) -> Vec<Result<Vec<O>, BatchError>> {
    let sizes: Vec<usize> = tasks.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut merged: Vec<I> = tasks.into_iter().flatten().collect();
    if let Some((target, filler)) = pad {
        if target > total {
            merged.resize(target, filler);
        }
    }
    let expected = merged.len();
    let broadcast = |e: BatchError| sizes.iter().map(|_| Err(e.clone())).collect();
    let mut out = match run(merged) {
        Ok(out) if out.len() == expected => out,
        Ok(out) => {
            return broadcast(BatchError::Execution(format!(
                "servable returned {} rows for a batch of {expected}",
                out.len()
            )))
        }
        Err(e) => return broadcast(e),
    };
    out.truncate(total);
    let mut rest = out.into_iter();
    sizes
        .iter()
        .map(|&n| Ok(rest.by_ref().take(n).collect()))
        .collect()
}
