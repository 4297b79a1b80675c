#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use modelserve_core::models::{AffineModel, AFFINE_MODEL_FILE, LOOKUP_TABLE_FILE};
use serde_json::Value;

/// `y = x * scale + bias` per output, with two labelled classes.
pub fn model(scale: f64, bias: f64) -> AffineModel {
    AffineModel::new(
        vec!["x0".into(), "x1".into()],
        vec![vec![scale, 0.0], vec![0.0, scale]],
        vec![bias, -bias],
        Some(vec!["neg".into(), "pos".into()]),
    )
    .unwrap()
}

pub fn regressor() -> AffineModel {
    AffineModel::new(vec!["x0".into(), "x1".into()], vec![vec![1.0, 2.0]], vec![0.5], None).unwrap()
}

pub fn write_affine(base: &Path, version: u64, m: &AffineModel) {
    let dir = base.join(version.to_string());
    let tmp = base.join(format!(".tmp-{version}"));
    fs::create_dir_all(&tmp).unwrap();
    fs::write(tmp.join(AFFINE_MODEL_FILE), m.to_json()).unwrap();
    fs::rename(tmp, dir).unwrap();
}

pub fn write_table(base: &Path, version: u64, tsv: &str) {
    let dir = base.join(version.to_string());
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(LOOKUP_TABLE_FILE), tsv).unwrap();
}

pub fn call(method: &str, url: &str, body: Option<&str>) -> (u16, String) {
    let req = ureq::request(method, url).timeout(Duration::from_secs(10));
    let result = match body {
        Some(b) => req.set("Content-Type", "application/json").send_string(b),
        None => req.call(),
    };
    match result {
        Ok(r) => (r.status(), r.into_string().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_string().unwrap()),
        Err(e) => panic!("{method} {url}: {e}"),
    }
}

pub fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|e| panic!("not JSON ({e}): {s}"))
}

pub fn eventually(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if f() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}
