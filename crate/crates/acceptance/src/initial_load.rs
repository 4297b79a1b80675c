//! Time to readiness for a server whose servables each take 100 ms to
//! load, with one and with eight initial load threads.

use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use modelserve_core::sources::{SourceConfig, SourceEntry};
use modelserve_core::{LoadError, Loader, ManagerConfig, Servable, ServableId};
use modelserve_server::{Server, ServerConfig};

use crate::{ms, Outcome};

struct SleepLoader(Duration);

impl Loader for SleepLoader {
    fn estimate_memory(&self) -> u64 {
        0
    }

    fn load(&mut self) -> Result<Box<Servable>, LoadError> {
        thread::sleep(self.0);
        Ok(Box::new(()))
    }
}

#[derive(Debug, Clone)]
pub struct LoadRun {
    pub ready_after: Duration,
    pub loaded: usize,
}

pub fn time_to_ready(servables: usize, load: Duration, threads: usize) -> Result<LoadRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let entries = (0..servables)
        .map(|i| {
            let base = dir.path().join(format!("s{i}"));
            std::fs::create_dir_all(base.join("1"))?;
            Ok(SourceEntry::new(format!("s{i}"), base))
        })
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let config = ServerConfig {
        port: 0,
        model_config: SourceConfig::new(entries).map_err(|e| e.to_string())?,
        manager: ManagerConfig {
            num_initial_load_threads: threads,
            ..ManagerConfig::default()
        },
        http_threads: 2,
        loader_factory: Some(Arc::new(move |_: &ServableId, _: PathBuf| {
            Box::new(SleepLoader(load)) as Box<dyn Loader>
        })),
        ..ServerConfig::default()
    };
    let started = Instant::now();
    let server = Server::start(config).map_err(|e| e.to_string())?;
    if !server.wait_ready(Duration::from_secs(30)) {
        return Err("server never became ready".into());
    }
    let ready_after = started.elapsed();
    let loaded = server
        .manager()
        .servable_names()
        .iter()
        .filter(|n| !server.manager().snapshot().versions(n).is_empty())
        .count();
    server.shutdown(Duration::from_secs(10));
    Ok(LoadRun { ready_after, loaded })
}

pub fn check() -> Outcome {
    Outcome::guard(|| {
        let load = Duration::from_millis(100);
        let parallel = time_to_ready(8, load, 8)?;
        let serial = time_to_ready(8, load, 1)?;
        let passed = parallel.ready_after < Duration::from_millis(400)
            && serial.ready_after >= Duration::from_millis(800)
            && parallel.loaded == 8
            && serial.loaded == 8;
        Ok(Outcome::new(
            passed,
            format!(
                "8 threads: ready in {} ({} loaded); 1 thread: ready in {} ({} loaded)",
                ms(parallel.ready_after),
                parallel.loaded,
                ms(serial.ready_after),
                serial.loaded
            ),
        ))
    })
}
