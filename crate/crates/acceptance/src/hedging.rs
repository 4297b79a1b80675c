//! Tail latency of a two-replica model with one intermittently slow
//! replica, with and without backup requests.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use modelserve_core::models::AffineModel;
use modelserve_fleet::config::HedgePolicy;
use modelserve_fleet::router::{InferRequest, Replica, Router, RoutingTable};
use modelserve_fleet::sim::{LatencyProfile, SimReplica};
use modelserve_server::api::Verb;
use serde_json::json;

use crate::{ms, percentile, Outcome};

#[derive(Debug, Clone)]
pub struct HedgeRun {
    pub requests: usize,
    pub errors: usize,
    pub p50: Duration,
    pub p99: Duration,
    pub hedged: u64,
}

impl HedgeRun {
    pub fn hedged_fraction(&self) -> f64 {
        self.hedged as f64 / self.requests as f64
    }
}

fn replicas(seed: u64) -> Vec<Arc<dyn Replica>> {
    let model = AffineModel::new(vec!["x".into()], vec![vec![3.0]], vec![1.0], None).unwrap();
    let base = Duration::from_millis(2);
    let fast = SimReplica::new("fast", LatencyProfile::fixed(base), seed);
    let flaky = SimReplica::new(
        "flaky",
        LatencyProfile {
            base,
            slow_probability: 0.1,
            slow: Duration::from_millis(200),
        },
        seed,
    );
    vec![
        Arc::new(fast.with_model("m", 1, model.clone())),
        Arc::new(flaky.with_model("m", 1, model)),
    ]
}

/// `clients` threads send `requests` requests in total through a router
/// over the two simulated replicas.
pub fn run(policy: HedgePolicy, requests: usize, clients: usize, seed: u64) -> HedgeRun {
    let router = Arc::new(Router::new(replicas(seed), policy));
    let table: RoutingTable = BTreeMap::from([(
        "m".to_string(),
        BTreeMap::from([(1u64, vec!["fast".to_string(), "flaky".to_string()])]),
    )]);
    router.set_table(table);
    let per_client = requests / clients;
    let workers: Vec<_> = (0..clients)
        .map(|c| {
            let router = Arc::clone(&router);
            thread::spawn(move || {
                let mut latencies = Vec::with_capacity(per_client);
                let mut errors = 0;
                for i in 0..per_client {
                    let request = InferRequest {
                        model: "m".into(),
                        version: None,
                        verb: Verb::Predict,
                        body: json!({"instances": [[(c * per_client + i) as f64]]}),
                    };
                    let t = Instant::now();
                    if router.route(request).is_err() {
                        errors += 1;
                    }
                    latencies.push(t.elapsed());
                }
                (latencies, errors)
            })
        })
        .collect();
    let mut all = Vec::with_capacity(requests);
    let mut errors = 0;
    for w in workers {
        let (l, e) = w.join().unwrap();
        all.extend(l);
        errors += e;
    }
    HedgeRun {
        requests: all.len(),
        errors,
        p50: percentile(&mut all, 50.0),
        p99: percentile(&mut all, 99.0),
        hedged: router.budget().hedged(),
    }
}

pub fn check() -> Outcome {
    let hedged_policy = HedgePolicy {
        hedge_delay_ms: 20,
        max_hedged_fraction: 0.05,
        overall_deadline_ms: 1000,
        budget_burst: 10,
    };
    let on = run(hedged_policy, 4000, 8, 7);
    let off = run(HedgePolicy::disabled(), 4000, 8, 7);
    let passed = on.p99 <= Duration::from_millis(30)
        && off.p99 >= Duration::from_millis(200)
        && on.hedged_fraction() <= 0.05 + 0.01
        && on.errors == 0
        && off.errors == 0;
    Outcome::new(
        passed,
        format!(
            "hedged p99 {} (p50 {}), unhedged p99 {} (p50 {}), hedged fraction {:.4}, {} + {} errors",
            ms(on.p99),
            ms(on.p50),
            ms(off.p99),
            ms(off.p50),
            on.hedged_fraction(),
            on.errors,
            off.errors
        ),
    )
}
