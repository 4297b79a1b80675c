use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use modelserve_core::models::ModelFormat;
use modelserve_core::sources::{
    AdaptingSink, CommandSource, FileSystemSource, FormatAdapter, RouteTable, SourceAdapter,
    SourceDriver, SourceRouter,
};
use modelserve_core::{
    AspiredVersionsManager, AspiredVersionsSink, EventBus, Loader, ServableId,
};

use crate::batcher::{Batcher, Follower};
use crate::config::{ConfigError, LoaderFactory, ServerConfig, SourceMode};
use crate::http::HttpFrontend;
use crate::logging::RequestLogger;
use crate::service::Service;

const LOG_QUEUE_CAPACITY: usize = 65_536;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot listen on port {port}: {source}")]
    Bind { port: u16, source: std::io::Error },
    #[error("cannot open request log: {0}")]
    Log(std::io::Error),
}

struct FactoryAdapter(LoaderFactory);

impl SourceAdapter<PathBuf, Box<dyn Loader>> for FactoryAdapter {
    fn adapt(&self, id: &ServableId, path: PathBuf) -> Box<dyn Loader> {
        (self.0)(id, path)
    }
}

/// Source-side entry of the lifecycle chain: routes each servable to the
/// adapter for its configured format, then into the manager.
fn build_chain(
    config: &ServerConfig,
    manager: &Arc<AspiredVersionsManager>,
) -> Arc<dyn AspiredVersionsSink<PathBuf>> {
    let downstream: Arc<dyn AspiredVersionsSink<Box<dyn Loader>>> = manager.clone();
    if let Some(factory) = &config.loader_factory {
        return Arc::new(AdaptingSink::new(FactoryAdapter(factory.clone()), downstream));
    }
    let formats = [ModelFormat::Affine, ModelFormat::LookupTable, ModelFormat::Auto];
    let port_of = |f: ModelFormat| formats.iter().position(|&g| g == f).expect("known format");
    let table = config
        .model_config
        .entries
        .iter()
        .fold(RouteTable::new(port_of(ModelFormat::Auto)), |t, e| {
            t.exact(e.name.clone(), port_of(e.format))
        });
    let ports = formats
        .iter()
        .map(|&f| {
            Arc::new(AdaptingSink::new(FormatAdapter::new(f), downstream.clone()))
                as Arc<dyn AspiredVersionsSink<PathBuf>>
        })
        .collect();
    Arc::new(SourceRouter::new(table, ports).expect("one port per format"))
}

/// A running model server.
pub struct Server {
    service: Arc<Service>,
    manager: Arc<AspiredVersionsManager>,
    http: HttpFrontend,
    startup: Option<JoinHandle<Option<SourceDriver>>>,
    driver: Mutex<Option<SourceDriver>>,
    follower: Option<Follower>,
    source: Option<Arc<FileSystemSource>>,
}

impl Server {
    /// Binds the listener and begins loading in the background. Requests
    /// are answered immediately; `/healthz` and inference return 503 until
    /// the first poll's versions have loaded.
    pub fn start(config: ServerConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let logger = Arc::new(
            RequestLogger::new(
                config.log_path.as_deref(),
                config.log_sample_rate,
                config.log_seed,
                LOG_QUEUE_CAPACITY,
            )
            .map_err(ServerError::Log)?,
        );
        let bus = Arc::new(EventBus::new());
        let manager = Arc::new(AspiredVersionsManager::with_event_bus(
            config.manager.clone(),
            bus.clone(),
        ));

        let batcher = config.batching.clone().map(|b| Arc::new(Batcher::new(b)));
        let follower = batcher.as_ref().map(|b| b.follow(bus.subscribe()));

        let chain = build_chain(&config, &manager);
        let command = (config.source_mode == SourceMode::Command)
            .then(|| CommandSource::new(chain.clone()));
        let service = Arc::new(Service::new(
            manager.clone(),
            batcher,
            logger,
            command,
        ));
        let http = HttpFrontend::bind(config.port, config.http_threads, service.clone())
            .map_err(|source| ServerError::Bind {
                port: config.port,
                source,
            })?;
        info!("listening on {}", http.addr());

        let source = (config.source_mode == SourceMode::Filesystem)
            .then(|| Arc::new(FileSystemSource::new(config.model_config.clone())));
        let startup = {
            let service = service.clone();
            let manager = manager.clone();
            let source = source.clone();
            thread::Builder::new()
                .name("startup".into())
                .spawn(move || {
                    let started = Instant::now();
                    let driver = source.map(|source| {
                        source.emit_to(chain.as_ref());
                        let report = manager.initial_load();
                        for (id, e) in &report.failed {
                            warn!("initial load of {id} failed: {e}");
                        }
                        info!(
                            "initial load: {} versions in {:?} on {} threads",
                            report.loaded.len(),
                            report.elapsed,
                            report.threads
                        );
                        source.spawn(chain)
                    });
                    manager.start();
                    service.mark_ready(started.elapsed().as_millis() as u64);
                    driver
                })
                .expect("spawn startup thread")
        };

        Ok(Self {
            service,
            manager,
            http,
            startup: Some(startup),
            driver: Mutex::new(None),
            follower,
            source,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.http.addr()
    }

    /// Base URL on the loopback interface.
    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.addr().port())
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    pub fn manager(&self) -> &Arc<AspiredVersionsManager> {
        &self.manager
    }

    pub fn source(&self) -> Option<&Arc<FileSystemSource>> {
        self.source.as_ref()
    }

    pub fn wait_ready(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while !self.service.is_ready() {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(2));
        }
        true
    }

    /// Stops serving, unloads every version and flushes the request log.
    /// Returns whether all versions unloaded within `timeout`.
    pub fn shutdown(mut self, timeout: Duration) -> bool {
        self.http.stop();
        if let Some(startup) = self.startup.take() {
            match startup.join() {
                Ok(driver) => *self.driver.lock().unwrap() = driver,
                Err(_) => warn!("startup thread panicked"),
            }
        }
        if let Some(driver) = self.driver.lock().unwrap().take() {
            driver.stop();
        }
        let clean = self.manager.shutdown(timeout);
        if let Some(f) = self.follower.take() {
            f.stop();
        }
        self.service.logger().close();
        clean
    }
}
