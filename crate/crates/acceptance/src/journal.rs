//! A seeded random command scenario run straight through and again with a
//! crash (including a torn final write) at a random point.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use modelserve_core::sources::VersionSelection;
use modelserve_fleet::controller::{CanaryConfig, Command, Controller, ControllerState};
use modelserve_fleet::journal::{Journal, JournalEntry};
use modelserve_fleet::{FleetConfig, JobSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn config() -> FleetConfig {
    let job = |id: &str, cap: u64| JobSpec {
        id: id.into(),
        ram_capacity: cap,
        replicas: vec![format!("http://{id}.invalid")],
    };
    FleetConfig::new(vec![job("a", 1_000), job("b", 2_500), job("c", 4_000)]).unwrap()
}

pub fn random_commands(n: usize, seed: u64) -> Vec<Command> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs = ["a", "b", "c", "nowhere"];
    (0..n)
        .map(|_| {
            let name = format!("model{}", rng.gen_range(0..6));
            match rng.gen_range(0..10) {
                0..=2 => Command::AddModel {
                    path: PathBuf::from(format!("/models/{name}")),
                    name,
                    selection: VersionSelection::Latest(rng.gen_range(1..3)),
                    versions: (1..=rng.gen_range(1..4)).collect(),
                    estimated_ram: rng.gen_range(0..1_200),
                },
                3 => Command::RemoveModel { name },
                4 => Command::AddVersion {
                    name,
                    version: rng.gen_range(1..8),
                },
                5 => Command::SetSelection {
                    name,
                    selection: VersionSelection::Specific(vec![rng.gen_range(1..5)]),
                    canary: None,
                },
                6 => Command::SetSelection {
                    name,
                    selection: VersionSelection::Latest(2),
                    canary: Some(CanaryConfig {
                        canary_version: rng.gen_range(1..5),
                        tee_fraction: rng.gen_range(0.0..1.0),
                    }),
                },
                _ => Command::Assign {
                    name,
                    job: jobs[rng.gen_range(0..jobs.len())].into(),
                },
            }
        })
        .collect()
}

fn execute_all(c: &mut Controller, commands: &[Command]) -> usize {
    commands.iter().filter(|cmd| c.execute((*cmd).clone()).is_ok()).count()
}

/// Replays `entries` one at a time, checking capacity after each.
fn unsafe_points(entries: &[JournalEntry], config: &FleetConfig) -> Result<usize, String> {
    let mut state = ControllerState::default();
    let mut bad = 0;
    for e in entries {
        state.apply(&e.command, &config.jobs).map_err(|err| err.to_string())?;
        if !state.capacity_safe(&config.jobs) {
            bad += 1;
        }
    }
    Ok(bad)
}

fn read_entries(path: &Path) -> Result<Vec<JournalEntry>, String> {
    Journal::open(path).map(|(_, e)| e).map_err(|e| e.to_string())
}

#[derive(Debug)]
pub struct CrashRun {
    pub commands: usize,
    pub crash_after: usize,
    pub torn_bytes: usize,
    pub journaled: usize,
    pub states_equal: bool,
    pub journals_equal: bool,
    pub unsafe_points: usize,
}

pub fn run(n: usize, seed: u64) -> Result<CrashRun, String> {
    let commands = random_commands(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let crash_after = rng.gen_range(1..n);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (straight, crashed) = (dir.path().join("straight.journal"), dir.path().join("crashed.journal"));
    let config = config();

    let mut c = Controller::open(&straight, config.clone()).map_err(|e| e.to_string())?;
    let journaled = execute_all(&mut c, &commands);
    let expected = c.state().clone();
    drop(c);

    let mut c = Controller::open(&crashed, config.clone()).map_err(|e| e.to_string())?;
    execute_all(&mut c, &commands[..crash_after]);
    drop(c);
    // The process died partway through writing the next record.
    let torn = serde_json::to_string(&JournalEntry {
        seq: u64::MAX,
        command: commands[crash_after].clone(),
    })
    .map_err(|e| e.to_string())?;
    let torn_bytes = rng.gen_range(1..torn.len());
    OpenOptions::new()
        .append(true)
        .open(&crashed)
        .and_then(|mut f| f.write_all(&torn.as_bytes()[..torn_bytes]))
        .map_err(|e| e.to_string())?;

    let mut c = Controller::open(&crashed, config.clone()).map_err(|e| e.to_string())?;
    execute_all(&mut c, &commands[crash_after..]);
    let states_equal = *c.state() == expected;
    drop(c);
    let recovered = Controller::open(&crashed, config.clone()).map_err(|e| e.to_string())?;
    let states_equal = states_equal && *recovered.state() == expected;

    let journals_equal = std::fs::read(&straight).map_err(|e| e.to_string())?
        == std::fs::read(&crashed).map_err(|e| e.to_string())?;
    let entries = read_entries(&crashed)?;
    Ok(CrashRun {
        commands: n,
        crash_after,
        torn_bytes,
        journaled,
        states_equal,
        journals_equal,
        unsafe_points: unsafe_points(&entries, &config)?,
    })
}

pub fn check() -> Outcome {
    Outcome::guard(|| {
        let r = run(200, 4242)?;
        let passed = r.states_equal && r.journals_equal && r.unsafe_points == 0 && r.journaled > 0;
        Ok(Outcome::new(
            passed,
            format!(
                "{} commands ({} journaled), crash after {} with {} torn bytes: replayed state {}, journals {}, {} capacity violations",
                r.commands,
                r.journaled,
                r.crash_after,
                r.torn_bytes,
                if r.states_equal { "equal" } else { "DIFFERENT" },
                if r.journals_equal { "identical" } else { "differ" },
                r.unsafe_points
            ),
        ))
    })
}
