//! In-process replicas with controllable latency.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::thread;
use std::time::Duration;

use modelserve_core::models::AffineModel;
use modelserve_server::api::{parse_numeric_instances, Verb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::router::{Replica, ReplicaError};

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyProfile {
    pub base: Duration,
    /// Probability that a call takes `slow` instead of `base`.
    pub slow_probability: f64,
    pub slow: Duration,
}

impl LatencyProfile {
    pub fn fixed(base: Duration) -> Self {
        Self {
            base,
            slow_probability: 0.0,
            slow: base,
        }
    }
}

/// Serves `predict` for affine models after a sampled delay.
pub struct SimReplica {
    endpoint: String,
    models: RwLock<BTreeMap<(String, u64), AffineModel>>,
    latency: LatencyProfile,
    rng: Mutex<ChaCha8Rng>,
    calls: AtomicU64,
}

impl SimReplica {
    pub fn new(endpoint: impl Into<String>, latency: LatencyProfile, seed: u64) -> Self {
        Self {
            endpoint: endpoint.into(),
            models: RwLock::new(BTreeMap::new()),
            latency,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_model(self, name: &str, version: u64, model: AffineModel) -> Self {
        self.models.write().unwrap().insert((name.to_string(), version), model);
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn delay(&self) -> Duration {
        let l = &self.latency;
        if l.slow_probability > 0.0 && self.rng.lock().unwrap().gen::<f64>() < l.slow_probability {
            l.slow
        } else {
            l.base
        }
    }
}

impl Replica for SimReplica {
    fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn infer(
        &self,
        model: &str,
        version: u64,
        verb: Verb,
        body: &Value,
    ) -> Result<Value, ReplicaError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        thread::sleep(self.delay());
        if verb != Verb::Predict {
            return Err(ReplicaError(format!("{} is not simulated", verb.as_str())));
        }
        let models = self.models.read().unwrap();
        let m = models
            .get(&(model.to_string(), version))
            .ok_or_else(|| ReplicaError(format!("{model} version {version} not loaded")))?;
        let rows = parse_numeric_instances(body).map_err(|e| ReplicaError(e.message))?;
        let out = m.predict(&rows).map_err(|e| ReplicaError(e.to_string()))?;
        Ok(json!({ "predictions": out }))
    }
}
