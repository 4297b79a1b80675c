use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crossbeam_channel::{select, Receiver, Sender};
use log::{debug, warn};
use modelserve_core::batching::{
    batched_run, pad_to_allowed, BatchError, BatchProcessor, DispatchHook, QueueHandle,
    SchedulerStats, SharedBatchScheduler,
};
use modelserve_core::models::AffineModel;
use modelserve_core::{ServableHandle, ServableId, ServableState, StateEvent};

use crate::config::BatchingSettings;

pub type Rows = Vec<Vec<f64>>;

/// One request's share of a batch. The handle keeps the version resident
/// until the batch has run.
pub struct PredictTask {
    pub handle: ServableHandle,
    pub rows: Rows,
}

/// Per-version batch queues for affine predictions over one shared
/// scheduler.
pub struct Batcher {
    scheduler: SharedBatchScheduler<PredictTask, Rows>,
    settings: BatchingSettings,
}

impl Batcher {
    pub fn new(settings: BatchingSettings) -> Self {
        Self::with_dispatch_hook(settings, None)
    }

    pub fn with_dispatch_hook(settings: BatchingSettings, hook: Option<DispatchHook>) -> Self {
        Self {
            scheduler: SharedBatchScheduler::with_dispatch_hook(
                settings.default.num_batch_threads,
                hook,
            ),
            settings,
        }
    }

    pub fn settings(&self) -> &BatchingSettings {
        &self.settings
    }

    pub fn max_task_size(&self, name: &str) -> usize {
        self.settings.for_servable(name).max_batch_size
    }

    pub fn register(&self, id: &ServableId) -> Result<(), BatchError> {
        let config = self.settings.for_servable(&id.name);
        self.scheduler.register_queue(
            id.clone(),
            config,
            affine_processor(config.allowed_batch_sizes.clone()),
        )?;
        Ok(())
    }

    /// Flushes the queue and waits for its batches to finish.
    pub fn remove(&self, id: &ServableId) -> Result<(), BatchError> {
        self.scheduler.remove_queue(id)
    }

    pub fn queue(&self, id: &ServableId) -> Option<QueueHandle<PredictTask, Rows>> {
        self.scheduler.queue(id)
    }

    pub fn stats(&self) -> SchedulerStats {
        self.scheduler.stats()
    }

    /// Keeps the queue set in step with the servable lifecycle: a queue per
    /// `Ready` version, drained and removed when it starts unloading.
    pub fn follow(self: &Arc<Self>, events: Receiver<StateEvent>) -> Follower {
        let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(0);
        let batcher = Arc::clone(self);
        let handle = thread::Builder::new()
            .name("batch-follower".into())
            .spawn(move || loop {
                select! {
                    recv(events) -> ev => match ev {
                        Ok(ev) => batcher.apply(&ev),
                        Err(_) => break,
                    },
                    recv(stop_rx) -> _ => break,
                }
            })
            .expect("spawn batch follower");
        Follower {
            stop: Some(stop_tx),
            handle: Some(handle),
        }
    }

    fn apply(&self, event: &StateEvent) {
        match event.to {
            ServableState::Ready => match self.register(&event.id) {
                Ok(()) => debug!("batch queue registered for {}", event.id),
                Err(e) => warn!("batch queue for {}: {e}", event.id),
            },
            ServableState::Unloading => match self.remove(&event.id) {
                Ok(()) | Err(BatchError::UnknownKey(_)) => {}
                Err(e) => warn!("removing batch queue for {}: {e}", event.id),
            },
            _ => {}
        }
    }
}

fn affine_processor(allowed: Option<Vec<usize>>) -> BatchProcessor<PredictTask, Rows> {
    Arc::new(move |tasks: Vec<PredictTask>| {
        let (handles, rows): (Vec<ServableHandle>, Vec<Rows>) =
            tasks.into_iter().map(|t| (t.handle, t.rows)).unzip();
        let Some(model) = handles.first().and_then(|h| h.get::<AffineModel>()) else {
            let e = BatchError::Execution("servable is not an affine model".into());
            return rows.iter().map(|_| Err(e.clone())).collect();
        };
        let total: usize = rows.iter().map(Vec::len).sum();
        let pad = allowed
            .as_deref()
            .map(|sizes| (pad_to_allowed(total, sizes), vec![0.0; model.in_dim()]));
        batched_run(
            |merged| model.predict(&merged).map_err(|e| BatchError::Execution(e.to_string())),
            rows,
            pad,
        )
    })
}

/// Event-following thread; stops when dropped.
pub struct Follower {
    stop: Option<Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl Follower {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Follower {
    fn drop(&mut self) {
        self.shutdown();
    }
}
