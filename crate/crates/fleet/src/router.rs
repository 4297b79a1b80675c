use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::RecvTimeoutError;
use modelserve_server::api::Verb;
use serde_json::Value;

use crate::canary::{CanaryTee, TeeJob};
use crate::config::HedgePolicy;

#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    pub model: String,
    /// `None` routes to the serving (non-canary) version.
    pub version: Option<u64>,
    pub verb: Verb,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ReplicaError(pub String);

/// One serving replica as seen by the router.
pub trait Replica: Send + Sync {
    fn endpoint(&self) -> &str;

    fn infer(&self, model: &str, version: u64, verb: Verb, body: &Value)
        -> Result<Value, ReplicaError>;
}

/// A model server reached over HTTP.
pub struct HttpReplica {
    endpoint: String,
    base: String,
    agent: ureq::Agent,
}

impl HttpReplica {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let endpoint = endpoint.into();
        Self {
            base: crate::channel::base_url(&endpoint),
            endpoint,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Replica for HttpReplica {
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
        let url = format!("{}/v1/models/{model}/versions/{version}:{}", self.base, verb.as_str());
        match self
            .agent
            .post(&url)
            .set("Content-Type", "application/json")
            .send_string(&body.to_string())
        {
            Ok(resp) => resp.into_json().map_err(|e| ReplicaError(e.to_string())),
            Err(ureq::Error::Status(code, resp)) => Err(ReplicaError(format!(
                "{code}: {}",
                resp.into_string().unwrap_or_default()
            ))),
            Err(e) => Err(ReplicaError(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("no replica has {model} version {version:?} loaded")]
    NoReplicaHasVersion { model: String, version: Option<u64> },
    #[error("deadline exceeded after {0:?}")]
    DeadlineExceeded(Duration),
    #[error("replica failed: {0}")]
    Replica(String),
}

/// Running cap on hedges: at most `floor(fraction * requests) + burst`.
#[derive(Debug)]
pub struct HedgeBudget {
    max_fraction: f64,
    burst: u64,
    total: AtomicU64,
    hedged: AtomicU64,
}

impl HedgeBudget {
    pub fn new(max_fraction: f64, burst: u64) -> Self {
        Self {
            max_fraction,
            burst,
            total: AtomicU64::new(0),
            hedged: AtomicU64::new(0),
        }
    }

    pub fn record_request(&self) {
        self.total.fetch_add(1, Ordering::AcqRel);
    }

    pub fn try_acquire(&self) -> bool {
        let allowed = (self.max_fraction * self.total.load(Ordering::Acquire) as f64).floor() as u64
            + self.burst;
        self.hedged
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |h| (h < allowed).then_some(h + 1))
            .is_ok()
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Acquire)
    }

    pub fn hedged(&self) -> u64 {
        self.hedged.load(Ordering::Acquire)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HedgedOutcome {
    pub body: Value,
    pub endpoint: String,
    pub hedged: bool,
    pub requests_sent: u32,
}

/// Sends to `candidates[0]`; if it has not answered after the hedge delay
/// and the budget allows, sends the same request to `candidates[1]`. The
/// first success wins and the other reply is dropped.
pub fn hedged_call(
    candidates: &[Arc<dyn Replica>],
    request: &Arc<InferRequest>,
    version: u64,
    policy: &HedgePolicy,
    budget: &HedgeBudget,
) -> Result<HedgedOutcome, RouteError> {
    let start = Instant::now();
    let deadline = start + policy.overall_deadline();
    let (tx, rx) = crossbeam_channel::bounded(2);
    let send = |replica: &Arc<dyn Replica>| {
        let (replica, request, tx) = (Arc::clone(replica), Arc::clone(request), tx.clone());
        thread::spawn(move || {
            let r = replica.infer(&request.model, version, request.verb, &request.body);
            let _ = tx.send((replica.endpoint().to_string(), r));
        });
    };

    send(&candidates[0]);
    let mut sent = 1u32;
    let mut hedged = false;
    let mut last_error = None;
    let first_wait = policy.hedge_delay().min(deadline.saturating_duration_since(Instant::now()));
    match rx.recv_timeout(first_wait) {
        Ok((endpoint, Ok(body))) => {
            return Ok(HedgedOutcome {
                body,
                endpoint,
                hedged,
                requests_sent: sent,
            })
        }
        Ok((_, Err(e))) => return Err(RouteError::Replica(e.0)),
        Err(RecvTimeoutError::Disconnected) => unreachable!("sender held locally"),
        Err(RecvTimeoutError::Timeout) => {
            if candidates.len() > 1 && Instant::now() < deadline && budget.try_acquire() {
                send(&candidates[1]);
                sent += 1;
                hedged = true;
            }
        }
    }
    drop(tx);

    let mut outstanding = sent;
    while outstanding > 0 {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok((endpoint, Ok(body))) => {
                return Ok(HedgedOutcome {
                    body,
                    endpoint,
                    hedged,
                    requests_sent: sent,
                })
            }
            Ok((_, Err(e))) => {
                outstanding -= 1;
                last_error = Some(e.0);
            }
            Err(_) => return Err(RouteError::DeadlineExceeded(start.elapsed())),
        }
    }
    Err(RouteError::Replica(last_error.unwrap_or_default()))
}

/// Ready replicas per model and version.
pub type RoutingTable = BTreeMap<String, BTreeMap<u64, Vec<String>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedResponse {
    pub body: Value,
    pub version: u64,
    pub endpoint: String,
    pub hedged: bool,
    pub requests_sent: u32,
}

/// Forwards inference to replicas holding the target version, hedging
/// slow calls and teeing a sample to a canary version when one is set.
pub struct Router {
    replicas: BTreeMap<String, Arc<dyn Replica>>,
    table: RwLock<RoutingTable>,
    policy: HedgePolicy,
    budget: HedgeBudget,
    rotation: AtomicUsize,
    canaries: RwLock<BTreeMap<String, Arc<CanaryTee>>>,
}

impl Router {
    pub fn new(replicas: Vec<Arc<dyn Replica>>, policy: HedgePolicy) -> Self {
        Self {
            budget: HedgeBudget::new(policy.max_hedged_fraction, policy.budget_burst),
            replicas: replicas
                .into_iter()
                .map(|r| (r.endpoint().to_string(), r))
                .collect(),
            table: RwLock::new(RoutingTable::new()),
            policy,
            rotation: AtomicUsize::new(0),
            canaries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn policy(&self) -> &HedgePolicy {
        &self.policy
    }

    pub fn budget(&self) -> &HedgeBudget {
        &self.budget
    }

    pub fn set_table(&self, table: RoutingTable) {
        *self.table.write().unwrap() = table;
    }

    pub fn table(&self) -> RoutingTable {
        self.table.read().unwrap().clone()
    }

    pub fn set_canary(&self, model: &str, tee: Option<Arc<CanaryTee>>) {
        let mut canaries = self.canaries.write().unwrap();
        match tee {
            Some(t) => canaries.insert(model.to_string(), t),
            None => canaries.remove(model),
        };
    }

    pub fn canary(&self, model: &str) -> Option<Arc<CanaryTee>> {
        self.canaries.read().unwrap().get(model).cloned()
    }

    fn replicas_for(&self, endpoints: &[String]) -> Vec<Arc<dyn Replica>> {
        endpoints
            .iter()
            .filter_map(|e| self.replicas.get(e).cloned())
            .collect()
    }

    pub fn route(&self, request: InferRequest) -> Result<RoutedResponse, RouteError> {
        let canary = self.canary(&request.model);
        let canary_version = canary.as_ref().map(|c| c.config().canary_version);
        let missing = || RouteError::NoReplicaHasVersion {
            model: request.model.clone(),
            version: request.version,
        };
        let (version, mut candidates, canary_replicas) = {
            let table = self.table.read().unwrap();
            let versions = table.get(&request.model).ok_or_else(missing)?;
            let version = match request.version {
                Some(v) => v,
                None => *versions
                    .keys()
                    .rev()
                    .find(|&&v| Some(v) != canary_version)
                    .ok_or_else(missing)?,
            };
            let candidates = self.replicas_for(versions.get(&version).ok_or_else(missing)?);
            let canary_replicas = canary_version
                .and_then(|cv| versions.get(&cv))
                .map(|eps| self.replicas_for(eps))
                .unwrap_or_default();
            (version, candidates, canary_replicas)
        };
        if candidates.is_empty() {
            return Err(missing());
        }
        let n = candidates.len();
        candidates.rotate_left(self.rotation.fetch_add(1, Ordering::Relaxed) % n);

        self.budget.record_request();
        let request = Arc::new(request);
        let outcome = hedged_call(&candidates, &request, version, &self.policy, &self.budget)?;

        if let Some(tee) = canary.filter(|c| Some(version) != Some(c.config().canary_version)) {
            if tee.sample() {
                let pick = self.rotation.load(Ordering::Relaxed);
                tee.submit(TeeJob {
                    request: Arc::clone(&request),
                    primary: outcome.body.clone(),
                    primary_version: version,
                    canary: canary_replicas.get(pick % canary_replicas.len().max(1)).cloned(),
                });
            }
        }
        Ok(RoutedResponse {
            body: outcome.body,
            version,
            endpoint: outcome.endpoint,
            hedged: outcome.hedged,
            requests_sent: outcome.requests_sent,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::CanaryConfig;
    use crate::sim::{LatencyProfile, SimReplica};
    use modelserve_core::models::AffineModel;
    use serde_json::json;
    use std::collections::BTreeSet;

    fn model(bias: f64) -> AffineModel {
        AffineModel::new(vec!["x".into()], vec![vec![2.0]], vec![bias], None).unwrap()
    }

    fn replica(name: &str, delay_ms: u64) -> Arc<dyn Replica> {
        Arc::new(
            SimReplica::new(name, LatencyProfile::fixed(Duration::from_millis(delay_ms)), 0)
                .with_model("m", 1, model(0.0))
                .with_model("m", 2, model(0.5)),
        )
    }

    fn policy(delay_ms: u64, deadline_ms: u64) -> HedgePolicy {
        HedgePolicy {
            hedge_delay_ms: delay_ms,
            max_hedged_fraction: 0.5,
            overall_deadline_ms: deadline_ms,
            budget_burst: 1,
        }
    }

    fn request(version: Option<u64>) -> InferRequest {
        InferRequest {
            model: "m".into(),
            version,
            verb: Verb::Predict,
            body: json!({"instances": [[1.5]]}),
        }
    }

    fn table(entries: &[(u64, &[&str])]) -> RoutingTable {
        let versions = entries
            .iter()
            .map(|(v, eps)| (*v, eps.iter().map(|e| e.to_string()).collect()))
            .collect();
        BTreeMap::from([("m".to_string(), versions)])
    }

    #[test]
    fn budget_is_fraction_plus_burst() {
        let b = HedgeBudget::new(0.1, 2);
        assert!(b.try_acquire());
        assert!(b.try_acquire());
        assert!(!b.try_acquire());
        for _ in 0..10 {
            b.record_request();
        }
        assert!(b.try_acquire());
        assert!(!b.try_acquire());
        assert_eq!(b.hedged(), 3);
    }

    #[test]
    fn fast_primary_is_not_hedged() {
        let budget = HedgeBudget::new(1.0, 10);
        let out = hedged_call(
            &[replica("a", 0), replica("b", 0)],
            &Arc::new(request(None)),
            1,
            &policy(200, 2000),
            &budget,
        )
        .unwrap();
        assert!(!out.hedged);
        assert_eq!(out.requests_sent, 1);
        assert_eq!(out.body, json!({"predictions": [[3.0]]}));
    }

    #[test]
    fn slow_primary_loses_to_backup() {
        let budget = HedgeBudget::new(1.0, 10);
        let started = Instant::now();
        let out = hedged_call(
            &[replica("slow", 500), replica("fast", 0)],
            &Arc::new(request(None)),
            1,
            &policy(10, 2000),
            &budget,
        )
        .unwrap();
        assert!(started.elapsed() < Duration::from_millis(400));
        assert!(out.hedged);
        assert_eq!(out.endpoint, "fast");
        assert_eq!(budget.hedged(), 1);
    }

    #[test]
    fn exhausted_budget_waits_for_primary() {
        let budget = HedgeBudget::new(0.0, 0);
        let out = hedged_call(
            &[replica("slow", 50), replica("fast", 0)],
            &Arc::new(request(None)),
            1,
            &policy(5, 2000),
            &budget,
        )
        .unwrap();
        assert!(!out.hedged);
        assert_eq!(out.endpoint, "slow");
    }

    #[test]
    fn deadline_bounds_the_call() {
        let budget = HedgeBudget::new(1.0, 10);
        let err = hedged_call(
            &[replica("a", 300), replica("b", 300)],
            &Arc::new(request(None)),
            1,
            &policy(10, 50),
            &budget,
        )
        .unwrap_err();
        assert!(matches!(err, RouteError::DeadlineExceeded(_)));
    }

    #[test]
    fn routes_to_newest_non_canary_version() {
        let router = Router::new(vec![replica("a", 0), replica("b", 0)], policy(100, 1000));
        router.set_table(table(&[(1, &["a", "b"]), (2, &["b"])]));
        assert_eq!(router.route(request(None)).unwrap().version, 2);
        assert_eq!(router.route(request(Some(1))).unwrap().version, 1);

        let tee = Arc::new(CanaryTee::new(
            CanaryConfig {
                canary_version: 2,
                tee_fraction: 1.0,
            },
            1,
            1,
            16,
        ));
        router.set_canary("m", Some(tee.clone()));
        let routed = router.route(request(None)).unwrap();
        assert_eq!(routed.version, 1);
        assert_eq!(routed.body, json!({"predictions": [[3.0]]}));
        assert!(tee.drain(Duration::from_secs(5)));
        let records = tee.records();
        assert_eq!(records.len(), 1);
        assert!((records[0].max_abs_delta.unwrap() - 0.5).abs() < 1e-12);

        assert!(matches!(
            router.route(request(Some(7))),
            Err(RouteError::NoReplicaHasVersion { .. })
        ));
        router.set_table(RoutingTable::new());
        assert!(router.route(request(None)).is_err());
    }

    #[test]
    fn primary_rotates_across_replicas() {
        let router = Router::new(vec![replica("a", 0), replica("b", 0)], policy(100, 1000));
        router.set_table(table(&[(1, &["a", "b"])]));
        let eps: BTreeSet<String> = (0..4).map(|_| router.route(request(None)).unwrap().endpoint).collect();
        assert_eq!(eps.len(), 2);
    }
}
