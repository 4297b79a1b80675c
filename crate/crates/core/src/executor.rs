//! Executor tags and a small fixed-size thread pool.
//!
//! Every thread that touches servables carries a tag naming its pool. The
//! manager stamps lifecycle events with it, which is how tests prove that
//! loads and payload destruction never run on inference threads.

use std::cell::Cell;
use std::thread::{self, JoinHandle};

use crossbeam_channel::Sender;

pub const MANAGER: &str = "manager";
pub const LOAD: &str = "load";
pub const INFERENCE: &str = "inference";
pub const BATCH: &str = "batch";
pub const UNTAGGED: &str = "untagged";

thread_local! {
    static TAG: Cell<&'static str> = const { Cell::new(UNTAGGED) };
}

pub fn set_current_tag(tag: &'static str) {
    TAG.with(|t| t.set(tag));
}

pub fn current_tag() -> &'static str {
    TAG.with(Cell::get)
}

type Job = Box<dyn FnOnce() + Send + 'static>;

/// Fixed pool of tagged worker threads fed through a shared channel.
/// Dropping the pool finishes queued jobs and joins the workers.
pub struct ThreadPool {
    tag: &'static str,
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl ThreadPool {
    pub fn new(tag: &'static str, threads: usize) -> Self {
        assert!(threads > 0, "thread pool needs at least one thread");
        let (tx, rx) = crossbeam_channel::unbounded::<Job>();
        let workers = (0..threads)
            .map(|i| {
                let rx = rx.clone();
                thread::Builder::new()
                    .name(format!("{tag}-{i}"))
                    .spawn(move || {
                        set_current_tag(tag);
                        for job in rx {
                            job();
                        }
                    })
                    .expect("spawn pool thread")
            })
            .collect();
        Self {
            tag,
            tx: Some(tx),
            workers,
        }
    }

    pub fn tag(&self) -> &'static str {
        self.tag
    }

    pub fn threads(&self) -> usize {
        self.workers.len()
    }

    pub fn execute(&self, job: impl FnOnce() + Send + 'static) {
        if let Some(tx) = &self.tx {
            // Receivers live as long as the workers, which outlive `tx`.
            let _ = tx.send(Box::new(job));
        }
    }
}

impl Drop for ThreadPool {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl std::fmt::Debug for ThreadPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThreadPool")
            .field("tag", &self.tag)
            .field("threads", &self.workers.len())
            .finish()
    }
}
