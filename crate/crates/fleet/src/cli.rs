use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};
use modelserve_core::sources::VersionSelection;
use serde::Serialize;
use serde_json::{json, Value};

use crate::channel::{HttpChannel, ServerChannel};
use crate::config::FleetConfig;
use crate::controller::Controller;
use crate::sync::{desired_lists, desired_ready, Synchronizer};
use crate::FleetError;

#[derive(Debug, Parser)]
#[command(name = "fleetctl", about = "Manage models across a fleet of model servers")]
pub struct Args {
    #[arg(long, default_value = "fleet.journal")]
    pub journal: PathBuf,
    #[arg(long = "fleet-config", default_value = "fleet.toml")]
    pub fleet_config: PathBuf,
    /// Sync rounds to run after a mutating command (0 skips syncing).
    #[arg(long = "sync-rounds", default_value_t = 5)]
    pub sync_rounds: u32,
    #[arg(long = "sync-interval-ms", default_value_t = 200)]
    pub sync_interval_ms: u64,
    #[arg(long = "timeout-ms", default_value_t = 5000)]
    pub timeout_ms: u64,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Verb {
    AddModel {
        #[arg(long)]
        name: String,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value = "latest")]
        selection: VersionSelection,
    },
    RemoveModel {
        #[arg(long)]
        name: String,
    },
    AddVersion {
        #[arg(long)]
        name: String,
        #[arg(long)]
        version: u64,
    },
    Rollback {
        #[arg(long)]
        name: String,
        #[arg(long)]
        version: u64,
    },
    Canary {
        #[arg(long)]
        name: String,
        #[arg(long)]
        version: u64,
        #[arg(long)]
        fraction: f64,
    },
    Status {
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SyncSummary {
    pub rounds: u64,
    pub converged: bool,
    pub ready: bool,
    pub failures: usize,
}

/// Runs sync rounds until every replica holds its desired lists with all
/// desired versions `Ready`, or `max_rounds` is reached.
pub fn converge<C: ServerChannel>(
    controller: &Controller,
    sync: &mut Synchronizer<C>,
    max_rounds: u32,
    interval: Duration,
) -> SyncSummary {
    let desired = desired_lists(controller.state(), controller.jobs());
    let mut summary = SyncSummary::default();
    for i in 0..max_rounds {
        if i > 0 {
            thread::sleep(interval);
        }
        let report = sync.run_round(&desired);
        summary.rounds += 1;
        summary.failures += report.failures;
        summary.converged = report.converged;
        summary.ready = report.converged && desired_ready(&desired, &report.statuses);
        if summary.ready {
            break;
        }
    }
    summary
}

fn model_json(controller: &Controller, name: &str) -> Result<Value, FleetError> {
    let model = controller
        .state()
        .models
        .get(name)
        .ok_or_else(|| FleetError::UnknownModel(name.to_string()))?;
    Ok(serde_json::to_value(model).expect("serializable"))
}

pub fn run(args: &Args) -> Result<Value, FleetError> {
    let config = FleetConfig::load(&args.fleet_config)?;
    let mut controller = Controller::open(&args.journal, config)?;
    let timeout = Duration::from_millis(args.timeout_ms);

    let mut out = match &args.verb {
        Verb::Status { name } => {
            let models = match name {
                Some(n) => json!({ n.clone(): model_json(&controller, n)? }),
                None => serde_json::to_value(&controller.state().models).expect("serializable"),
            };
            let channel = HttpChannel::new(timeout);
            let mut replicas = serde_json::Map::new();
            for job in controller.jobs() {
                for endpoint in &job.replicas {
                    let entry = match channel.status(endpoint) {
                        Ok(mut s) => {
                            if let Some(n) = name {
                                s.retain(|k, _| k == n);
                            }
                            json!({ "job": job.id, "servables": s })
                        }
                        Err(e) => json!({ "job": job.id, "error": e.message }),
                    };
                    replicas.insert(endpoint.clone(), entry);
                }
            }
            return Ok(json!({
                "seq": controller.state().seq,
                "models": models,
                "replicas": replicas,
            }));
        }
        Verb::AddModel {
            name,
            path,
            selection,
        } => {
            let job = controller.add_model(name, path, selection.clone())?;
            json!({ "job": job, "model": model_json(&controller, name)? })
        }
        Verb::RemoveModel { name } => {
            let seq = controller.remove_model(name)?;
            json!({ "seq": seq, "removed": name })
        }
        Verb::AddVersion { name, version } => {
            let seq = controller.add_version(name, *version)?;
            json!({ "seq": seq, "model": model_json(&controller, name)? })
        }
        Verb::Rollback { name, version } => {
            let seq = controller.rollback(name, *version)?;
            json!({ "seq": seq, "model": model_json(&controller, name)? })
        }
        Verb::Canary {
            name,
            version,
            fraction,
        } => {
            let seq = controller.canary(name, *version, *fraction)?;
            json!({ "seq": seq, "model": model_json(&controller, name)? })
        }
    };

    if args.sync_rounds > 0 {
        let mut sync = Synchronizer::new(HttpChannel::new(timeout));
        let summary = converge(
            &controller,
            &mut sync,
            args.sync_rounds,
            Duration::from_millis(args.sync_interval_ms),
        );
        out["sync"] = serde_json::to_value(summary).expect("serializable");
    }
    Ok(out)
}
