//! Fleet run over real server processes: add a model, canary its second
//! version with a traffic tee, then roll back.

use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use modelserve_core::models::AffineModel;
use modelserve_core::sources::VersionSelection;
use modelserve_fleet::canary::CanaryTee;
use modelserve_fleet::channel::HttpChannel;
use modelserve_fleet::cli::converge;
use modelserve_fleet::config::{FleetConfig, HedgePolicy, JobSpec};
use modelserve_fleet::controller::Controller;
use modelserve_fleet::harness::{server_binary, ServerProcess};
use modelserve_fleet::router::{HttpReplica, InferRequest, Replica, Router};
use modelserve_fleet::sync::{desired_lists, ready_replicas, Synchronizer};
use modelserve_server::api::Verb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::Outcome;

const DELTA: f64 = 0.1;
const REQUESTS: usize = 10_000;
const TEE_FRACTION: f64 = 0.1;

fn write_version(base: &Path, version: u64, model: &AffineModel) -> std::io::Result<()> {
    let dir = base.join(version.to_string());
    let staging = base.join(format!(".staging-{version}"));
    std::fs::create_dir_all(&staging)?;
    std::fs::write(staging.join("model.json"), model.to_json())?;
    std::fs::rename(staging, dir)
}

#[derive(Debug, Default)]
pub struct CanaryRun {
    pub routed: usize,
    pub route_errors: usize,
    pub wrong_primary: usize,
    pub teed: u64,
    pub dropped: u64,
    pub compared: usize,
    pub comparison_errors: usize,
    pub worst_delta_error: f64,
    pub rollback_rounds: Option<u64>,
}

pub fn run(servers: usize, seed: u64) -> Result<CanaryRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = server_binary().map_err(|e| format!("locating model_server: {e}"))?;
    let procs = (0..servers)
        .map(|_| ServerProcess::spawn(&bin, &[]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("spawning model_server: {e}"))?;
    for p in &procs {
        if !p.wait_healthy(Duration::from_secs(30)) {
            return Err(format!("{} never became healthy", p.url()));
        }
    }
    let endpoints: Vec<String> = procs.iter().map(|p| p.url().to_string()).collect();

    let v1 = AffineModel::new(
        vec!["a".into(), "b".into()],
        vec![vec![0.5, -1.25], vec![2.0, 0.75]],
        vec![0.3, -0.7],
        None,
    )
    .unwrap();
    let v2 = v1.shifted(DELTA);
    let models = dir.path().join("models/m");
    std::fs::create_dir_all(&models).map_err(|e| e.to_string())?;
    write_version(&models, 1, &v1).map_err(|e| e.to_string())?;

    let config = FleetConfig {
        hedge: HedgePolicy::default(),
        ..FleetConfig::new(vec![JobSpec {
            id: "main".into(),
            ram_capacity: 1 << 30,
            replicas: endpoints.clone(),
        }])
        .map_err(|e| e.to_string())?
    };
    let mut controller =
        Controller::open(&dir.path().join("fleet.journal"), config.clone()).map_err(|e| e.to_string())?;
    let mut sync = Synchronizer::new(HttpChannel::new(Duration::from_secs(5)));
    let interval = Duration::from_millis(50);

    controller
        .add_model("m", &models, VersionSelection::Latest(1))
        .map_err(|e| e.to_string())?;
    if !converge(&controller, &mut sync, 40, interval).ready {
        return Err("v1 never became ready on every server".into());
    }
    write_version(&models, 2, &v2).map_err(|e| e.to_string())?;
    controller.add_version("m", 2).map_err(|e| e.to_string())?;
    controller.canary("m", 2, TEE_FRACTION).map_err(|e| e.to_string())?;
    if !converge(&controller, &mut sync, 40, interval).ready {
        return Err("canary pair never became ready on every server".into());
    }

    let replicas: Vec<Arc<dyn Replica>> = endpoints
        .iter()
        .map(|e| Arc::new(HttpReplica::new(e.clone(), Duration::from_secs(5))) as Arc<dyn Replica>)
        .collect();
    let router = Arc::new(Router::new(replicas, config.hedge.clone()));
    router.set_table(ready_replicas(sync.last_statuses()));
    let canary_config = controller.state().models["m"].canary.clone().ok_or("canary not recorded")?;
    let tee = Arc::new(CanaryTee::new(canary_config, seed, 2, REQUESTS));
    router.set_canary("m", Some(Arc::clone(&tee)));

    let clients = 4;
    let workers: Vec<_> = (0..clients)
        .map(|c| {
            let (router, v1) = (Arc::clone(&router), v1.clone());
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1 + c as u64);
                let (mut ok, mut errors, mut wrong) = (0, 0, 0);
                for _ in 0..REQUESTS / clients {
                    let row = vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
                    let expected = json!({ "predictions": v1.predict(&[row.clone()]).unwrap() });
                    let request = InferRequest {
                        model: "m".into(),
                        version: None,
                        verb: Verb::Predict,
                        body: json!({ "instances": [row] }),
                    };
                    match router.route(request) {
                        Ok(r) => {
                            ok += 1;
                            if r.version != 1 || r.body != expected {
                                wrong += 1;
                            }
                        }
                        Err(_) => errors += 1,
                    }
                }
                (ok, errors, wrong)
            })
        })
        .collect();
    let mut out = CanaryRun::default();
    for w in workers {
        let (ok, e, wrong) = w.join().map_err(|_| "client panicked")?;
        out.routed += ok;
        out.route_errors += e;
        out.wrong_primary += wrong;
    }
    tee.drain(Duration::from_secs(60));
    out.teed = tee.teed();
    out.dropped = tee.dropped();
    for r in tee.records() {
        match (r.error, r.max_abs_delta) {
            (None, Some(d)) => {
                out.compared += 1;
                out.worst_delta_error = out.worst_delta_error.max((d - DELTA).abs());
            }
            _ => out.comparison_errors += 1,
        }
    }
    router.set_canary("m", None);
    tee.close();

    controller.rollback("m", 1).map_err(|e| e.to_string())?;
    let desired = desired_lists(controller.state(), controller.jobs());
    for round in 1..=5u64 {
        let report = sync.run_round(&desired);
        let only_v1 = report.statuses.len() == endpoints.len()
            && report.statuses.values().all(|s| {
                s.get("m").is_some_and(|vs| {
                    vs.iter().any(|v| v.version == 1 && v.state == "Ready" && v.is_aspired)
                        && vs.iter().all(|v| v.version == 1 || !v.is_aspired)
                })
            });
        if report.converged && only_v1 {
            out.rollback_rounds = Some(round);
            break;
        }
        thread::sleep(interval);
    }
    drop(procs);
    Ok(out)
}

pub fn check() -> Outcome {
    Outcome::guard(|| {
        let r = run(2, 20_240_601)?;
        let tee_count = r.teed + r.dropped;
        let passed = (910..=1090).contains(&tee_count)
            && r.dropped == 0
            && r.route_errors == 0
            && r.wrong_primary == 0
            && r.comparison_errors == 0
            && r.compared as u64 == r.teed
            && r.worst_delta_error <= 1e-9
            && r.rollback_rounds.is_some();
        Ok(Outcome::new(
            passed,
            format!(
                "{} routed ({} errors, {} not from v1), tee count {tee_count} ({} dropped), {} comparisons ({} failed), worst |delta - {DELTA}| {:.2e}, rollback converged in {}",
                r.routed,
                r.route_errors,
                r.wrong_primary,
                r.dropped,
                r.compared,
                r.comparison_errors,
                r.worst_delta_error,
                r.rollback_rounds.map_or("more than 5 rounds".to_string(), |n| format!("{n} rounds")),
            ),
        ))
    })
}
