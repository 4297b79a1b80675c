use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use modelserve_core::sources::select_versions;
use modelserve_server::api::{AspireRequest, AspireVersion, VersionStatusJson};

use crate::channel::{ServerChannel, ServerStatus};
use crate::config::JobSpec;
use crate::controller::ControllerState;

/// What each replica endpoint should serve: servable name to full list.
pub type DesiredLists = BTreeMap<String, BTreeMap<String, Vec<AspireVersion>>>;

/// Aspired version numbers per servable, as a replica reports them.
pub type AspiredSets = BTreeMap<String, BTreeSet<u64>>;

/// Expands controller state into per-replica lists. Every replica of every
/// job appears, possibly with no servables.
pub fn desired_lists(state: &ControllerState, jobs: &[JobSpec]) -> DesiredLists {
    let mut out: DesiredLists = jobs
        .iter()
        .flat_map(|j| j.replicas.iter().map(|r| (r.clone(), BTreeMap::new())))
        .collect();
    for model in state.models.values() {
        let Some(job) = model.assignment.as_ref().and_then(|a| jobs.iter().find(|j| &j.id == a))
        else {
            continue;
        };
        let versions: Vec<AspireVersion> = select_versions(&model.versions, &model.selection)
            .versions
            .into_iter()
            .map(|v| AspireVersion {
                version: v,
                path: model.version_path(v),
            })
            .collect();
        for replica in &job.replicas {
            out.get_mut(replica)
                .expect("every replica listed")
                .insert(model.name.clone(), versions.clone());
        }
    }
    out
}

pub fn aspired_sets(status: &ServerStatus) -> AspiredSets {
    status
        .iter()
        .map(|(name, versions)| {
            let set = versions.iter().filter(|v| v.is_aspired).map(|v| v.version).collect();
            (name.clone(), set)
        })
        .collect()
}

/// Commands bringing each replica from `reported` to `desired`. A replica
/// with no report is treated as empty and gets every list. Servables a
/// replica still aspires but should not serve get an empty list.
pub fn sync_diff(
    desired: &DesiredLists,
    reported: &BTreeMap<String, AspiredSets>,
) -> BTreeMap<String, Vec<AspireRequest>> {
    let empty = AspiredSets::new();
    let mut out = BTreeMap::new();
    for (endpoint, want) in desired {
        let have = reported.get(endpoint).unwrap_or(&empty);
        let mut commands = Vec::new();
        for (name, versions) in want {
            let wanted: BTreeSet<u64> = versions.iter().map(|v| v.version).collect();
            if have.get(name).cloned().unwrap_or_default() != wanted {
                commands.push(AspireRequest {
                    servable_name: name.clone(),
                    versions: versions.clone(),
                });
            }
        }
        for (name, aspired) in have {
            if !want.contains_key(name) && !aspired.is_empty() {
                commands.push(AspireRequest {
                    servable_name: name.clone(),
                    versions: Vec::new(),
                });
            }
        }
        if !commands.is_empty() {
            out.insert(endpoint.clone(), commands);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointHealth {
    pub consecutive_failures: u32,
    pub last_error: Option<String>,
    /// Round before which this endpoint is not contacted again.
    pub retry_at_round: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub commands_sent: usize,
    pub failures: usize,
    /// Every replica answered and needed no commands.
    pub converged: bool,
    pub statuses: BTreeMap<String, ServerStatus>,
}

impl RoundReport {
    /// Whether every reachable replica reports `version` of `name` as
    /// `state`.
    pub fn all_report(&self, name: &str, version: u64, state: &str) -> bool {
        !self.statuses.is_empty()
            && self.statuses.values().all(|s| {
                s.get(name).is_some_and(|vs| {
                    vs.iter().any(|v| v.version == version && v.state == state)
                })
            })
    }
}

/// Pushes desired lists to replicas, one reconciliation round at a time.
pub struct Synchronizer<C> {
    channel: C,
    round: u64,
    max_backoff_rounds: u64,
    health: BTreeMap<String, EndpointHealth>,
    last: BTreeMap<String, ServerStatus>,
}

impl<C: ServerChannel> Synchronizer<C> {
    pub fn new(channel: C) -> Self {
        Self {
            channel,
            round: 0,
            max_backoff_rounds: 8,
            health: BTreeMap::new(),
            last: BTreeMap::new(),
        }
    }

    pub fn channel(&self) -> &C {
        &self.channel
    }

    pub fn health(&self) -> &BTreeMap<String, EndpointHealth> {
        &self.health
    }

    /// Most recent status from each replica that has answered.
    pub fn last_statuses(&self) -> &BTreeMap<String, ServerStatus> {
        &self.last
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    fn failed(&mut self, endpoint: &str, message: String) {
        let h = self.health.entry(endpoint.to_string()).or_default();
        h.consecutive_failures += 1;
        let backoff = (1u64 << h.consecutive_failures.min(16)).min(self.max_backoff_rounds);
        h.retry_at_round = self.round + backoff;
        warn!("sync {endpoint}: {message} (retry in {backoff} rounds)");
        h.last_error = Some(message);
    }

    pub fn run_round(&mut self, desired: &DesiredLists) -> RoundReport {
        self.round += 1;
        let mut report = RoundReport {
            round: self.round,
            converged: true,
            ..RoundReport::default()
        };
        for (endpoint, want) in desired {
            let retry_at = self.health.get(endpoint).map_or(0, |h| h.retry_at_round);
            if retry_at > self.round {
                report.converged = false;
                continue;
            }
            let mut status = match self.channel.status(endpoint) {
                Ok(s) => s,
                Err(e) => {
                    self.failed(endpoint, e.message);
                    report.failures += 1;
                    report.converged = false;
                    continue;
                }
            };
            let reported = BTreeMap::from([(endpoint.clone(), aspired_sets(&status))]);
            let single = BTreeMap::from([(endpoint.clone(), want.clone())]);
            let commands = sync_diff(&single, &reported).remove(endpoint).unwrap_or_default();
            let mut ok = true;
            for command in &commands {
                debug!("sync {endpoint}: aspire {} {:?}", command.servable_name, command.versions);
                match self.channel.push(endpoint, command) {
                    Ok(list) => {
                        report.commands_sent += 1;
                        status.insert(command.servable_name.clone(), list);
                    }
                    Err(e) => {
                        self.failed(endpoint, e.message);
                        report.failures += 1;
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                self.health.insert(endpoint.clone(), EndpointHealth::default());
            }
            if !commands.is_empty() || !ok {
                report.converged = false;
            }
            self.last.insert(endpoint.clone(), status.clone());
            report.statuses.insert(endpoint.clone(), status);
        }
        report
    }
}

/// Ready replicas per servable and version, from replica statuses.
pub fn ready_replicas(
    statuses: &BTreeMap<String, ServerStatus>,
) -> BTreeMap<String, BTreeMap<u64, Vec<String>>> {
    let mut table: BTreeMap<String, BTreeMap<u64, Vec<String>>> = BTreeMap::new();
    for (endpoint, status) in statuses {
        for (name, versions) in status {
            for v in versions.iter().filter(|v| is_ready(v)) {
                table
                    .entry(name.clone())
                    .or_default()
                    .entry(v.version)
                    .or_default()
                    .push(endpoint.clone());
            }
        }
    }
    table
}

/// Whether every desired version is `Ready` on its replica, per `statuses`.
pub fn desired_ready(desired: &DesiredLists, statuses: &BTreeMap<String, ServerStatus>) -> bool {
    desired.iter().all(|(endpoint, want)| {
        want.iter().all(|(name, versions)| {
            versions.iter().all(|v| {
                statuses
                    .get(endpoint)
                    .and_then(|s| s.get(name))
                    .is_some_and(|vs| vs.iter().any(|r| r.version == v.version && is_ready(r)))
            })
        })
    })
}

fn is_ready(v: &VersionStatusJson) -> bool {
    v.state == "Ready"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::TransportError;
    use crate::controller::{Command, ControllerState};
    use modelserve_core::sources::VersionSelection;
    use std::path::PathBuf;
    use std::sync::Mutex;

    fn job(id: &str, replicas: &[&str]) -> JobSpec {
        JobSpec {
            id: id.into(),
            ram_capacity: 1000,
            replicas: replicas.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn state_with(jobs: &[JobSpec], versions: &[u64], selection: VersionSelection) -> ControllerState {
        let mut s = ControllerState::default();
        s.apply(
            &Command::AddModel {
                name: "m".into(),
                path: PathBuf::from("/store/m"),
                selection,
                versions: versions.to_vec(),
                estimated_ram: 10,
            },
            jobs,
        )
        .unwrap();
        s.apply(&Command::Assign { name: "m".into(), job: "a".into() }, jobs)
            .unwrap();
        s
    }

    #[test]
    fn desired_expands_to_replicas() {
        let jobs = vec![job("a", &["r1", "r2"]), job("b", &["r3"])];
        let d = desired_lists(&state_with(&jobs, &[1, 2, 3], VersionSelection::Latest(2)), &jobs);
        assert_eq!(d.len(), 3);
        assert!(d["r3"].is_empty());
        let versions: Vec<u64> = d["r1"]["m"].iter().map(|v| v.version).collect();
        assert_eq!(versions, vec![3, 2]);
        assert_eq!(d["r2"]["m"][0].path, PathBuf::from("/store/m/3"));
    }

    #[test]
    fn diff_examples() {
        let jobs = vec![job("a", &["A"])];
        let desired = desired_lists(&state_with(&jobs, &[3], VersionSelection::default()), &jobs);

        let converged = BTreeMap::from([("A".to_string(), AspiredSets::from([("m".into(), BTreeSet::from([3]))]))]);
        assert!(sync_diff(&desired, &converged).is_empty());

        let stale = BTreeMap::from([("A".to_string(), AspiredSets::from([("m".into(), BTreeSet::from([2]))]))]);
        let diff = sync_diff(&desired, &stale);
        assert_eq!(diff["A"].len(), 1);
        assert_eq!(diff["A"][0].servable_name, "m");
        assert_eq!(diff["A"][0].versions[0].version, 3);

        let restarted = sync_diff(&desired, &BTreeMap::new());
        assert_eq!(restarted["A"].len(), 1);

        let extra = BTreeMap::from([(
            "A".to_string(),
            AspiredSets::from([("m".into(), BTreeSet::from([3])), ("old".into(), BTreeSet::from([1]))]),
        )]);
        let diff = sync_diff(&desired, &extra);
        assert_eq!(diff["A"].len(), 1);
        assert_eq!(diff["A"][0].servable_name, "old");
        assert!(diff["A"][0].versions.is_empty());

        let tombstone = BTreeMap::from([(
            "A".to_string(),
            AspiredSets::from([("m".into(), BTreeSet::from([3])), ("old".into(), BTreeSet::new())]),
        )]);
        assert!(sync_diff(&desired, &tombstone).is_empty());
    }

    /// In-memory replicas that apply aspired lists instantly.
    #[derive(Default)]
    struct FakeChannel {
        servers: Mutex<BTreeMap<String, ServerStatus>>,
        down: Mutex<BTreeSet<String>>,
        pushes: Mutex<usize>,
    }

    impl ServerChannel for FakeChannel {
        fn status(&self, endpoint: &str) -> Result<ServerStatus, TransportError> {
            if self.down.lock().unwrap().contains(endpoint) {
                return Err(TransportError { endpoint: endpoint.into(), message: "down".into() });
            }
            Ok(self.servers.lock().unwrap().get(endpoint).cloned().unwrap_or_default())
        }

        fn push(&self, endpoint: &str, req: &AspireRequest) -> Result<Vec<VersionStatusJson>, TransportError> {
            *self.pushes.lock().unwrap() += 1;
            let list: Vec<VersionStatusJson> = req
                .versions
                .iter()
                .map(|v| VersionStatusJson {
                    version: v.version,
                    state: "Ready".into(),
                    is_aspired: true,
                    error_message: None,
                })
                .collect();
            self.servers
                .lock()
                .unwrap()
                .entry(endpoint.into())
                .or_default()
                .insert(req.servable_name.clone(), list.clone());
            Ok(list)
        }
    }

    #[test]
    fn converges_and_backs_off() {
        let jobs = vec![job("a", &["A", "B"])];
        let desired = desired_lists(&state_with(&jobs, &[1, 2], VersionSelection::default()), &jobs);
        let mut sync = Synchronizer::new(FakeChannel::default());
        sync.channel().down.lock().unwrap().insert("B".into());

        let r1 = sync.run_round(&desired);
        assert_eq!((r1.commands_sent, r1.failures, r1.converged), (1, 1, false));
        assert_eq!(sync.health()["B"].consecutive_failures, 1);
        assert!(r1.all_report("m", 2, "Ready"));

        sync.channel().down.lock().unwrap().clear();
        let r2 = sync.run_round(&desired);
        assert!(!r2.converged, "B is still backing off");
        let r3 = sync.run_round(&desired);
        assert_eq!(r3.commands_sent, 1);
        let r4 = sync.run_round(&desired);
        assert!(r4.converged);
        assert_eq!(*sync.channel().pushes.lock().unwrap(), 2);
        assert_eq!(ready_replicas(&r4.statuses)["m"][&2], vec!["A".to_string(), "B".to_string()]);
    }
}
