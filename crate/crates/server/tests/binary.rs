mod common;

use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::time::Duration;

use common::*;

#[test]
fn serves_and_exits_cleanly_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    write_affine(dir.path(), 1, &model(2.0, 0.0));
    let mut child = Command::new(env!("CARGO_BIN_EXE_model_server"))
        .args(["--port=0", "--model_name=m", "--poll_interval_s=0.05", "--enable_batching"])
        .arg(format!("--model_base_path={}", dir.path().display()))
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let port = line.trim().rsplit(':').next().unwrap().to_string();
    let url = format!("http://127.0.0.1:{port}");

    assert!(eventually(Duration::from_secs(10), || call("GET", &format!("{url}/healthz"), None).0 == 200));
    let (code, body) = call("POST", &format!("{url}/v1/models/m:predict"), Some(r#"{"instances": [[1, 2]]}"#));
    assert_eq!(code, 200);
    assert_eq!(json(&body)["predictions"], serde_json::json!([[2.0, 4.0]]));

    let status = Command::new("kill").arg("-TERM").arg(child.id().to_string()).status().unwrap();
    assert!(status.success());
    assert!(child.wait().unwrap().success());
}

#[test]
fn bad_flags_exit_with_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_model_server"))
        .args(["--model_base_path=/nowhere", "--version_policy=sometimes"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_model_server"))
        .args(["--log_sample_rate=0.5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("filesystem mode"));
}
