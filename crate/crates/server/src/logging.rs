//! Request log: one JSON line per request, with full bodies for a seeded
//! random sample. A single writer thread owns the file; request threads
//! only push into a bounded channel and drop records when it is full.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{SystemTime, UNIX_EPOCH};

use crossbeam_channel::{Sender, TrySendError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogRecord {
    pub timestamp_ms: u64,
    pub endpoint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub servable: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub version: Option<u64>,
    pub body_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub body: Option<String>,
    pub status: u16,
    pub latency_ns: u64,
    pub sampled: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LogStats {
    pub records: u64,
    pub sampled: u64,
    pub dropped: u64,
    pub write_errors: u64,
}

#[derive(Default)]
struct Counters {
    records: AtomicU64,
    sampled: AtomicU64,
    dropped: AtomicU64,
    write_errors: AtomicU64,
}

pub struct RequestLogger {
    rate: f64,
    sampler: Mutex<ChaCha8Rng>,
    tx: Mutex<Option<Sender<RequestLogRecord>>>,
    writer: Mutex<Option<JoinHandle<()>>>,
    counters: Arc<Counters>,
}

pub fn body_digest(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

impl RequestLogger {
    /// Logger writing to `path` (appending), or only counting when `None`.
    pub fn new(
        path: Option<&Path>,
        sample_rate: f64,
        seed: u64,
        capacity: usize,
    ) -> std::io::Result<Self> {
        let counters = Arc::new(Counters::default());
        let (tx, writer) = match path {
            Some(path) => {
                let file = OpenOptions::new().create(true).append(true).open(path)?;
                let (tx, rx) = crossbeam_channel::bounded(capacity.max(1));
                let counters = Arc::clone(&counters);
                let handle = thread::Builder::new()
                    .name("request-log".into())
                    .spawn(move || write_loop(file, rx, &counters))?;
                (Some(tx), Some(handle))
            }
            None => (None, None),
        };
        Ok(Self {
            rate: sample_rate,
            sampler: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            tx: Mutex::new(tx),
            writer: Mutex::new(writer),
            counters,
        })
    }

    pub fn disabled() -> Self {
        Self::new(None, 0.0, 0, 1).expect("no file to open")
    }

    pub fn sample_rate(&self) -> f64 {
        self.rate
    }

    /// Draws the keep-full-body decision for one request.
    pub fn sample(&self) -> bool {
        if self.rate <= 0.0 {
            return false;
        }
        if self.rate >= 1.0 {
            return true;
        }
        self.sampler.lock().unwrap().gen::<f64>() < self.rate
    }

    #[allow(clippy::too_many_arguments)]
    pub fn log(
        &self,
        endpoint: &str,
        servable: Option<&str>,
        version: Option<u64>,
        body: &[u8],
        status: u16,
        latency_ns: u64,
    ) {
        let sampled = self.sample();
        let record = RequestLogRecord {
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            endpoint: endpoint.to_string(),
            servable: servable.map(str::to_string),
            version,
            body_sha256: body_digest(body),
            body: sampled.then(|| String::from_utf8_lossy(body).into_owned()),
            status,
            latency_ns,
            sampled,
        };
        self.record(record);
    }

    pub fn record(&self, record: RequestLogRecord) {
        self.counters.records.fetch_add(1, Ordering::Relaxed);
        if record.sampled {
            self.counters.sampled.fetch_add(1, Ordering::Relaxed);
        }
        if let Some(tx) = self.tx.lock().unwrap().as_ref() {
            match tx.try_send(record) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                    self.counters.dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    pub fn stats(&self) -> LogStats {
        let c = &self.counters;
        LogStats {
            records: c.records.load(Ordering::Relaxed),
            sampled: c.sampled.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
            write_errors: c.write_errors.load(Ordering::Relaxed),
        }
    }

    /// Writes out everything queued and stops the writer thread.
    pub fn close(&self) {
        self.tx.lock().unwrap().take();
        if let Some(handle) = self.writer.lock().unwrap().take() {
            let _ = handle.join();
        }
    }
}

impl Drop for RequestLogger {
    fn drop(&mut self) {
        self.close();
    }
}

fn write_loop(
    file: File,
    rx: crossbeam_channel::Receiver<RequestLogRecord>,
    counters: &Counters,
) {
    let mut out = BufWriter::new(file);
    while let Ok(first) = rx.recv() {
        for record in std::iter::once(first).chain(rx.try_iter()) {
            let line = serde_json::to_vec(&record).expect("log records serialize");
            if out.write_all(&line).and_then(|_| out.write_all(b"\n")).is_err() {
                counters.write_errors.fetch_add(1, Ordering::Relaxed);
            }
        }
        if out.flush().is_err() {
            counters.write_errors.fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufRead;

    fn run(rate: f64, n: usize) -> (LogStats, Vec<RequestLogRecord>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.jsonl");
        let logger = RequestLogger::new(Some(&path), rate, 7, 100_000).unwrap();
        for i in 0..n {
            logger.log("predict", Some("m"), Some(1), format!("body {i}").as_bytes(), 200, 5);
        }
        logger.close();
        let records = std::io::BufReader::new(File::open(&path).unwrap())
            .lines()
            .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
            .collect();
        (logger.stats(), records)
    }

    #[test]
    fn rate_zero_keeps_no_bodies() {
        let (stats, records) = run(0.0, 1000);
        assert_eq!(records.len(), 1000);
        assert_eq!(stats.sampled, 0);
        assert!(records.iter().all(|r| r.body.is_none() && !r.sampled));
    }

    #[test]
    fn rate_one_keeps_every_body() {
        let (stats, records) = run(1.0, 1000);
        assert_eq!(stats.sampled, 1000);
        assert!(records.iter().all(|r| r.body.is_some()));
        assert_eq!(records[3].body.as_deref(), Some("body 3"));
        assert_eq!(records[3].body_sha256, body_digest(b"body 3"));
    }

    #[test]
    fn seeded_rate_within_three_sigma() {
        let (stats, records) = run(0.1, 10_000);
        assert!((910..=1090).contains(&stats.sampled), "{}", stats.sampled);
        assert_eq!(records.iter().filter(|r| r.body.is_some()).count() as u64, stats.sampled);
    }

    #[test]
    fn full_channel_drops_and_counts() {
        let logger = RequestLogger::new(None, 0.0, 0, 1).unwrap();
        logger.log("x", None, None, b"", 200, 1);
        assert_eq!(logger.stats().records, 1);
        assert_eq!(logger.stats().dropped, 0);

        let dir = tempfile::tempdir().unwrap();
        let logger = RequestLogger::new(Some(&dir.path().join("l")), 0.0, 0, 1).unwrap();
        let (tx, _keep) = crossbeam_channel::bounded(1);
        tx.send(RequestLogRecord {
            timestamp_ms: 0,
            endpoint: String::new(),
            servable: None,
            version: None,
            body_sha256: String::new(),
            body: None,
            status: 0,
            latency_ns: 0,
            sampled: false,
        })
        .unwrap();
        *logger.tx.lock().unwrap() = Some(tx);
        logger.log("x", None, None, b"", 200, 1);
        assert_eq!(logger.stats().dropped, 1);
    }
}
