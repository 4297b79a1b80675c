//! Spawning `model_server` child processes in command mode.

use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

/// Finds the server binary: `$MODEL_SERVER_BIN`, then next to the running
/// executable's target directory, then by building it.
pub fn server_binary() -> io::Result<PathBuf> {
    if let Some(p) = std::env::var_os("MODEL_SERVER_BIN") {
        return Ok(PathBuf::from(p));
    }
    let exe = std::env::current_exe()?;
    for dir in exe.ancestors().skip(1).take(3) {
        let candidate = dir.join("model_server");
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    let status = Command::new(std::env::var_os("CARGO").unwrap_or_else(|| "cargo".into()))
        .args(["build", "--quiet", "-p", "modelserve-server", "--bin", "model_server"])
        .status()?;
    if !status.success() {
        return Err(io::Error::new(io::ErrorKind::Other, "building model_server failed"));
    }
    let target = exe
        .ancestors()
        .find(|d| d.join("model_server").is_file())
        .map(Path::to_path_buf)
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "model_server not found after build"))?;
    Ok(target.join("model_server"))
}

/// A `model_server --source_mode=command` child on a free port. Sent
/// SIGTERM when dropped.
pub struct ServerProcess {
    child: Child,
    url: String,
}

impl ServerProcess {
    pub fn spawn(binary: &Path, extra_args: &[&str]) -> io::Result<Self> {
        let mut child = Command::new(binary)
            .args(["--port=0", "--source_mode=command"])
            .args(extra_args)
            .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .spawn()?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().expect("piped stdout")).read_line(&mut line)?;
        let Some(port) = line.trim().strip_prefix("listening on ").and_then(|a| a.rsplit(':').next())
        else {
            let _ = child.kill();
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected server banner {line:?}"),
            ));
        };
        let url = format!("http://127.0.0.1:{port}");
        Ok(Self { child, url })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Polls `/healthz` until it answers 200.
    pub fn wait_healthy(&self, timeout: Duration) -> bool {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(1)).build();
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if agent.get(&format!("{}/healthz", self.url)).call().is_ok() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        false
    }

    /// SIGTERM, then waits up to `timeout` before killing outright.
    pub fn terminate(&mut self, timeout: Duration) -> io::Result<bool> {
        if self.child.try_wait()?.is_some() {
            return Ok(true);
        }
        Command::new("kill")
            .args(["-TERM", &self.child.id().to_string()])
            .status()?;
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Some(status) = self.child.try_wait()? {
                return Ok(status.success());
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        self.child.kill()?;
        self.child.wait()?;
        Ok(false)
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.terminate(Duration::from_secs(10));
    }
}
