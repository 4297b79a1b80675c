use std::fs::OpenOptions;
use std::path::PathBuf;

use modelserve_core::sources::VersionSelection;
use modelserve_fleet::controller::CanaryConfig;
use modelserve_fleet::{Command, Controller, ControllerState, FleetConfig, JobSpec};
use proptest::prelude::*;

fn config() -> FleetConfig {
    FleetConfig::new(vec![
        JobSpec {
            id: "small".into(),
            ram_capacity: 300,
            replicas: vec!["http://a".into()],
        },
        JobSpec {
            id: "large".into(),
            ram_capacity: 1000,
            replicas: vec!["http://b".into()],
        },
    ])
    .unwrap()
}

const NAMES: [&str; 4] = ["m0", "m1", "m2", "m3"];

fn command() -> impl Strategy<Value = Command> {
    let name = (0..NAMES.len()).prop_map(|i| NAMES[i].to_string());
    prop_oneof![
        (name.clone(), prop::collection::btree_set(1u64..6, 0..4), 0u64..700).prop_map(
            |(name, versions, ram)| Command::AddModel {
                path: PathBuf::from(format!("/models/{name}")),
                name,
                selection: VersionSelection::Latest(1),
                versions: versions.into_iter().collect(),
                estimated_ram: ram,
            }
        ),
        name.clone().prop_map(|name| Command::RemoveModel { name }),
        (name.clone(), 1u64..8).prop_map(|(name, version)| Command::AddVersion { name, version }),
        (name.clone(), 1u64..8).prop_map(|(name, v)| Command::SetSelection {
            name,
            selection: VersionSelection::Specific(vec![v]),
            canary: None,
        }),
        (name.clone(), 1u64..8, 0.0f64..1.0).prop_map(|(name, v, f)| Command::SetSelection {
            name,
            selection: VersionSelection::Latest(2),
            canary: Some(CanaryConfig {
                canary_version: v,
                tee_fraction: f,
            }),
        }),
        (name, prop::bool::ANY).prop_map(|(name, large)| Command::Assign {
            name,
            job: if large { "large" } else { "small" }.into(),
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crash_at_any_byte_recovers_a_committed_prefix(
        commands in prop::collection::vec(command(), 1..40),
        cut in 0.0f64..=1.0,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fleet.journal");
        let mut snapshots = vec![ControllerState::default()];
        {
            let mut c = Controller::open(&path, config()).unwrap();
            for cmd in commands {
                if c.execute(cmd).is_ok() {
                    snapshots.push(c.state().clone());
                }
                prop_assert!(c.state().capacity_safe(c.jobs()));
            }
        }

        let bytes = std::fs::read(&path).unwrap();
        let keep = (bytes.len() as f64 * cut) as usize;
        let committed = bytes[..keep].iter().filter(|b| **b == b'\n').count();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(keep as u64).unwrap();

        let mut c = Controller::open(&path, config()).unwrap();
        prop_assert_eq!(c.state(), &snapshots[committed]);
        prop_assert!(c.state().capacity_safe(c.jobs()));

        // The recovered journal accepts further appends and replays them.
        let seq = c.execute(Command::AddModel {
            name: "fresh".into(),
            path: "/models/fresh".into(),
            selection: VersionSelection::Latest(1),
            versions: vec![1],
            estimated_ram: 0,
        }).unwrap();
        prop_assert_eq!(seq, committed as u64 + 1);
        let after = c.state().clone();
        drop(c);
        let reopened = Controller::open(&path, config()).unwrap();
        prop_assert_eq!(reopened.state(), &after);
    }
}

#[test]
fn corrupt_middle_record_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fleet.journal");
    {
        let mut c = Controller::open(&path, config()).unwrap();
        for name in ["a", "b"] {
            c.execute(Command::AddModel {
                name: name.into(),
                path: "/m".into(),
                selection: VersionSelection::Latest(1),
                versions: vec![],
                estimated_ram: 1,
            })
            .unwrap();
        }
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[0] = "{not json";
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = Controller::open(&path, config()).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}
