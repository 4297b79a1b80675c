use std::path::Path;
use std::process::Command;
use std::time::Duration;

use modelserve_core::models::AffineModel;
use modelserve_fleet::harness::{server_binary, ServerProcess};
use serde_json::Value;

fn write_model(base: &Path, version: u64, bias: f64) {
    let dir = base.join(version.to_string());
    std::fs::create_dir_all(&dir).unwrap();
    let m = AffineModel::new(vec!["x".into()], vec![vec![1.0]], vec![bias], None).unwrap();
    let tmp = base.join(format!(".{version}.tmp"));
    std::fs::write(&tmp, m.to_json().to_string()).unwrap();
    std::fs::rename(tmp, dir.join("model.json")).unwrap();
}

struct Fleet {
    dir: tempfile::TempDir,
    servers: Vec<ServerProcess>,
}

impl Fleet {
    fn ctl(&self, args: &[&str]) -> Result<Value, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_fleetctl"))
            .arg(format!("--journal={}", self.dir.path().join("fleet.journal").display()))
            .arg(format!("--fleet-config={}", self.dir.path().join("fleet.toml").display()))
            .args(["--sync-rounds=20", "--sync-interval-ms=50"])
            .args(args)
            .output()
            .unwrap();
        if out.status.success() {
            Ok(serde_json::from_slice(&out.stdout).unwrap())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    }

    fn predict(&self, server: usize) -> Value {
        let url = format!("{}/v1/models/m:predict", self.servers[server].url());
        let resp = ureq::post(&url).send_string(r#"{"instances": [[2.0]]}"#).unwrap();
        serde_json::from_str(&resp.into_string().unwrap()).unwrap()
    }
}

fn start_fleet() -> Fleet {
    let dir = tempfile::tempdir().unwrap();
    let bin = server_binary().unwrap();
    let servers: Vec<ServerProcess> =
        (0..2).map(|_| ServerProcess::spawn(&bin, &[]).unwrap()).collect();
    for s in &servers {
        assert!(s.wait_healthy(Duration::from_secs(20)));
    }
    let replicas: Vec<String> = servers.iter().map(|s| format!("{:?}", s.url())).collect();
    std::fs::write(
        dir.path().join("fleet.toml"),
        format!(
            "[[job]]\nid = \"tiny\"\nram_capacity = 10\nreplicas = [{}]\n\n\
             [[job]]\nid = \"main\"\nram_capacity = 100000000\nreplicas = [{}]\n",
            replicas[0],
            replicas.join(", ")
        ),
    )
    .unwrap();
    Fleet { dir, servers }
}

#[test]
fn add_version_canary_rollback_remove() {
    let fleet = start_fleet();
    let models = fleet.dir.path().join("models/m");
    write_model(&models, 1, 0.0);

    let out = fleet.ctl(&["add-model", "--name=m", &format!("--path={}", models.display())]).unwrap();
    assert_eq!(out["job"], "main", "{out}");
    assert_eq!(out["sync"]["ready"], true, "{out}");
    assert_eq!(fleet.predict(0)["predictions"], serde_json::json!([[2.0]]));
    assert_eq!(fleet.predict(1)["predictions"], serde_json::json!([[2.0]]));

    write_model(&models, 2, 0.25);
    let out = fleet.ctl(&["add-version", "--name=m", "--version=2"]).unwrap();
    assert_eq!(out["sync"]["ready"], true, "{out}");
    assert!(fleet.ctl(&["canary", "--name=m", "--version=1", "--fraction=0.1"]).is_err());
    let out = fleet.ctl(&["canary", "--name=m", "--version=2", "--fraction=0.1"]).unwrap();
    assert_eq!(out["sync"]["ready"], true, "{out}");

    let status = fleet.ctl(&["status", "--name=m"]).unwrap();
    for s in &fleet.servers {
        let versions = &status["replicas"][s.url()]["servables"]["m"];
        let aspired: Vec<u64> = versions
            .as_array()
            .unwrap()
            .iter()
            .filter(|v| v["is_aspired"] == true && v["state"] == "Ready")
            .map(|v| v["version"].as_u64().unwrap())
            .collect();
        assert_eq!(aspired.len(), 2, "{status}");
    }
    assert_eq!(status["models"]["m"]["canary"]["canary_version"], 2);

    let out = fleet.ctl(&["rollback", "--name=m", "--version=1"]).unwrap();
    assert_eq!(out["sync"]["ready"], true, "{out}");
    assert_eq!(fleet.predict(0)["predictions"], serde_json::json!([[2.0]]));

    let out = fleet.ctl(&["remove-model", "--name=m"]).unwrap();
    assert_eq!(out["sync"]["converged"], true, "{out}");
    let status = fleet.ctl(&["status"]).unwrap();
    for s in &fleet.servers {
        let aspired = status["replicas"][s.url()]["servables"]["m"]
            .as_array()
            .map_or(0, |vs| vs.iter().filter(|v| v["is_aspired"] == true).count());
        assert_eq!(aspired, 0, "{status}");
    }

    let journal = std::fs::read_to_string(fleet.dir.path().join("fleet.journal")).unwrap();
    assert_eq!(journal.lines().count(), 6);
}

#[test]
fn errors_are_reported_as_json_and_not_journaled() {
    let fleet = start_fleet();
    let err = fleet.ctl(&["remove-model", "--name=ghost"]).unwrap_err();
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("ghost"));
    let err = fleet.ctl(&["add-model", "--name=m", "--path=/does/not/exist"]).unwrap_err();
    assert!(err.contains("/does/not/exist"), "{err}");
    let journal = fleet.dir.path().join("fleet.journal");
    assert_eq!(std::fs::read_to_string(journal).unwrap_or_default(), "");
}
