use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Sender, TrySendError};
use log::debug;
use modelserve_server::api::Verb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::controller::CanaryConfig;
use crate::router::{InferRequest, Replica};

/// Outcome of replaying one sampled request against the canary version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub request_digest: String,
    pub primary_version: u64,
    pub canary_version: u64,
    pub max_abs_delta: Option<f64>,
    /// Only set for classification.
    pub argmax_agree: Option<bool>,
    pub error: Option<String>,
}

pub struct TeeJob {
    pub request: Arc<InferRequest>,
    pub primary: Value,
    pub primary_version: u64,
    /// `None` when no replica has the canary version loaded yet.
    pub canary: Option<Arc<dyn Replica>>,
}

#[derive(Default)]
struct Shared {
    records: Mutex<Vec<ComparisonRecord>>,
    finished: AtomicU64,
}

/// Samples a fraction of primary traffic and replays it off the request
/// path against the canary version. Jobs that do not fit in the queue are
/// dropped and counted.
pub struct CanaryTee {
    config: CanaryConfig,
    sampler: Mutex<ChaCha8Rng>,
    queue: Mutex<Option<Sender<TeeJob>>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    shared: Arc<Shared>,
    teed: AtomicU64,
    dropped: AtomicU64,
}

impl CanaryTee {
    pub fn new(config: CanaryConfig, seed: u64, workers: usize, capacity: usize) -> Self {
        let (tx, rx) = crossbeam_channel::bounded::<TeeJob>(capacity);
        let shared = Arc::new(Shared::default());
        let canary_version = config.canary_version;
        let handles = (0..workers.max(1))
            .map(|i| {
                let rx = rx.clone();
                let shared = Arc::clone(&shared);
                thread::Builder::new()
                    .name(format!("canary-tee-{i}"))
                    .spawn(move || {
                        for job in rx {
                            let record = run_job(&job, canary_version);
                            debug!("canary comparison: {record:?}");
                            shared.records.lock().unwrap().push(record);
                            shared.finished.fetch_add(1, Ordering::AcqRel);
                        }
                    })
                    .expect("spawn canary worker")
            })
            .collect();
        Self {
            config,
            sampler: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            queue: Mutex::new(Some(tx)),
            workers: Mutex::new(handles),
            shared,
            teed: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &CanaryConfig {
        &self.config
    }

    /// One Bernoulli draw at the tee fraction.
    pub fn sample(&self) -> bool {
        let f = self.config.tee_fraction;
        if f <= 0.0 {
            return false;
        }
        f >= 1.0 || self.sampler.lock().unwrap().gen::<f64>() < f
    }

    /// Queues a comparison. Returns false if it was dropped.
    pub fn submit(&self, job: TeeJob) -> bool {
        let queue = self.queue.lock().unwrap();
        let Some(tx) = queue.as_ref() else {
            self.dropped.fetch_add(1, Ordering::AcqRel);
            return false;
        };
        match tx.try_send(job) {
            Ok(()) => {
                self.teed.fetch_add(1, Ordering::AcqRel);
                true
            }
            Err(TrySendError::Full(_) | TrySendError::Disconnected(_)) => {
                self.dropped.fetch_add(1, Ordering::AcqRel);
                false
            }
        }
    }

    pub fn teed(&self) -> u64 {
        self.teed.load(Ordering::Acquire)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Acquire)
    }

    pub fn records(&self) -> Vec<ComparisonRecord> {
        self.shared.records.lock().unwrap().clone()
    }

    /// Waits until every queued comparison has been recorded.
    pub fn drain(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.shared.finished.load(Ordering::Acquire) < self.teed() {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(1));
        }
        true
    }

    pub fn summary(&self) -> CanarySummary {
        CanarySummary::of(&self.records())
    }

    /// Stops the workers after the queued comparisons finish.
    pub fn close(&self) {
        self.queue.lock().unwrap().take();
        for w in self.workers.lock().unwrap().drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for CanaryTee {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CanarySummary {
    pub compared: u64,
    pub errors: u64,
    pub max_abs_delta: Option<f64>,
    pub argmax_disagreements: u64,
}

impl CanarySummary {
    pub fn of(records: &[ComparisonRecord]) -> Self {
        let mut s = Self::default();
        for r in records {
            if r.error.is_some() {
                s.errors += 1;
                continue;
            }
            s.compared += 1;
            if let Some(d) = r.max_abs_delta {
                s.max_abs_delta = Some(s.max_abs_delta.map_or(d, |m: f64| m.max(d)));
            }
            if r.argmax_agree == Some(false) {
                s.argmax_disagreements += 1;
            }
        }
        s
    }
}

pub fn request_digest(request: &InferRequest) -> String {
    let mut h = Sha256::new();
    h.update(request.model.as_bytes());
    h.update([0]);
    h.update(request.verb.as_str().as_bytes());
    h.update([0]);
    h.update(request.body.to_string().as_bytes());
    hex::encode(h.finalize())
}

fn run_job(job: &TeeJob, canary_version: u64) -> ComparisonRecord {
    let mut record = ComparisonRecord {
        request_digest: request_digest(&job.request),
        primary_version: job.primary_version,
        canary_version,
        max_abs_delta: None,
        argmax_agree: None,
        error: None,
    };
    let outcome = match &job.canary {
        None => Err("no replica has the canary version loaded".to_string()),
        Some(replica) => replica
            .infer(&job.request.model, canary_version, job.request.verb, &job.request.body)
            .map_err(|e| e.0)
            .and_then(|canary| compare(job.request.verb, &job.primary, &canary)),
    };
    match outcome {
        Ok((delta, agree)) => {
            record.max_abs_delta = Some(delta);
            record.argmax_agree = agree;
        }
        Err(e) => record.error = Some(e),
    }
    record
}

/// Largest absolute difference between two responses and, for
/// classification, whether every example's top label agrees.
pub fn compare(verb: Verb, primary: &Value, canary: &Value) -> Result<(f64, Option<bool>), String> {
    match verb {
        Verb::Classify => compare_classify(primary, canary),
        Verb::Predict | Verb::Regress => {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            numeric_leaves(primary, &mut a);
            numeric_leaves(canary, &mut b);
            if a.len() != b.len() {
                return Err(format!("output sizes differ: {} vs {}", a.len(), b.len()));
            }
            Ok((max_delta(a.into_iter().zip(b)), None))
        }
    }
}

fn max_delta(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn numeric_leaves(v: &Value, out: &mut Vec<f64>) {
    match v {
        Value::Number(n) => out.extend(n.as_f64()),
        Value::Array(items) => items.iter().for_each(|i| numeric_leaves(i, out)),
        Value::Object(map) => map.values().for_each(|i| numeric_leaves(i, out)),
        _ => {}
    }
}

type Scored = Vec<(String, f64)>;

fn classify_results(v: &Value) -> Result<Vec<Scored>, String> {
    let results = v.get("results").ok_or("classification response has no results")?;
    serde_json::from_value(results.clone()).map_err(|e| format!("bad classification response: {e}"))
}

fn top_label(scored: &Scored) -> Option<&str> {
    scored
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(l, _)| l.as_str())
}

fn compare_classify(primary: &Value, canary: &Value) -> Result<(f64, Option<bool>), String> {
    let (p, c) = (classify_results(primary)?, classify_results(canary)?);
    if p.len() != c.len() {
        return Err(format!("example counts differ: {} vs {}", p.len(), c.len()));
    }
    let mut delta = 0.0f64;
    let mut agree = true;
    for (pe, ce) in p.iter().zip(&c) {
        let cmap: BTreeMap<&str, f64> = ce.iter().map(|(l, s)| (l.as_str(), *s)).collect();
        if cmap.len() != pe.len() {
            return Err("label sets differ".into());
        }
        for (label, score) in pe {
            let other = cmap.get(label.as_str()).ok_or_else(|| format!("label {label} missing"))?;
            delta = delta.max((score - other).abs());
        }
        agree &= top_label(pe) == top_label(ce);
    }
    Ok((delta, Some(agree)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn predict_delta() {
        let a = json!({"predictions": [[1.0, 2.0], [3.0, 4.0]]});
        let b = json!({"predictions": [[1.1, 2.0], [3.0, 3.75]]});
        let (d, agree) = compare(Verb::Predict, &a, &b).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
        assert_eq!(agree, None);
        assert!(compare(Verb::Predict, &a, &json!({"predictions": [[1.0]]})).is_err());
    }

    #[test]
    fn classify_matches_by_label() {
        let a = json!({"results": [[["pos", 0.7], ["neg", 0.3]]]});
        let b = json!({"results": [[["neg", 0.4], ["pos", 0.6]]]});
        let (d, agree) = compare(Verb::Classify, &a, &b).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        assert_eq!(agree, Some(true));
        let flipped = json!({"results": [[["neg", 0.8], ["pos", 0.2]]]});
        assert_eq!(compare(Verb::Classify, &a, &flipped).unwrap().1, Some(false));
        let other = json!({"results": [[["cat", 0.8], ["pos", 0.2]]]});
        assert!(compare(Verb::Classify, &a, &other).is_err());
    }

    #[test]
    fn sampler_is_seeded() {
        let cfg = CanaryConfig {
            canary_version: 2,
            tee_fraction: 0.3,
        };
        let draws = |seed| {
            let tee = CanaryTee::new(cfg.clone(), seed, 1, 4);
            (0..1000).map(|_| tee.sample()).collect::<Vec<_>>()
        };
        assert_eq!(draws(7), draws(7));
        let hits = draws(7).iter().filter(|&&b| b).count();
        assert!((240..360).contains(&hits), "{hits}");
    }

    #[test]
    fn missing_canary_replica_is_an_error_record() {
        let tee = CanaryTee::new(
            CanaryConfig {
                canary_version: 2,
                tee_fraction: 1.0,
            },
            0,
            1,
            4,
        );
        let request = Arc::new(InferRequest {
            model: "m".into(),
            version: None,
            verb: Verb::Predict,
            body: json!({"instances": [[1.0]]}),
        });
        assert!(tee.submit(TeeJob {
            request,
            primary: json!({"predictions": [[1.0]]}),
            primary_version: 1,
            canary: None,
        }));
        assert!(tee.drain(Duration::from_secs(5)));
        let s = tee.summary();
        assert_eq!((s.compared, s.errors), (0, 1));
    }
}
