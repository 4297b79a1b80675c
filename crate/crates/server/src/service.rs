use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use modelserve_core::batching::BatchError;
use modelserve_core::manager::VersionSpec;
use modelserve_core::models::{decode_batch_json, AffineModel, LookupTable, ModelError};
use modelserve_core::sources::CommandSource;
use modelserve_core::{AspiredVersion, AspiredVersionList, AspiredVersionsManager, ServableHandle};
use serde_json::{json, Value};

use crate::api::{self, ApiError, AspireRequest, Route, Verb, VersionStatusJson};
use crate::batcher::{Batcher, PredictTask, Rows};
use crate::logging::RequestLogger;

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl Response {
    fn json(status: u16, body: Value) -> Self {
        Self {
            status,
            content_type: "application/json",
            body: body.to_string(),
        }
    }

    fn error(e: &ApiError) -> Self {
        Self {
            status: e.status,
            content_type: "application/json",
            body: e.body(),
        }
    }
}

#[derive(Default)]
struct VersionCounters {
    requests: u64,
    latency_ns_sum: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    ok: AtomicU64,
    client_errors: AtomicU64,
    server_errors: AtomicU64,
    unbatched_fallbacks: AtomicU64,
    per_version: Mutex<BTreeMap<(String, u64), VersionCounters>>,
}

/// Request handling shared by every HTTP worker.
pub struct Service {
    manager: Arc<AspiredVersionsManager>,
    batcher: Option<Arc<Batcher>>,
    logger: Arc<RequestLogger>,
    command: Option<CommandSource>,
    ready: AtomicBool,
    initial_load_ms: AtomicU64,
    counters: Counters,
}

impl Service {
    pub fn new(
        manager: Arc<AspiredVersionsManager>,
        batcher: Option<Arc<Batcher>>,
        logger: Arc<RequestLogger>,
        command: Option<CommandSource>,
    ) -> Self {
        Self {
            manager,
            batcher,
            logger,
            command,
            ready: AtomicBool::new(false),
            initial_load_ms: AtomicU64::new(0),
            counters: Counters::default(),
        }
    }

    pub fn manager(&self) -> &Arc<AspiredVersionsManager> {
        &self.manager
    }

    pub fn batcher(&self) -> Option<&Arc<Batcher>> {
        self.batcher.as_ref()
    }

    pub fn logger(&self) -> &Arc<RequestLogger> {
        &self.logger
    }

    pub fn is_ready(&self) -> bool {
        self.ready.load(Ordering::Acquire)
    }

    pub(crate) fn mark_ready(&self, initial_load_ms: u64) {
        self.initial_load_ms.store(initial_load_ms, Ordering::Relaxed);
        self.ready.store(true, Ordering::Release);
    }

    pub fn handle(&self, method: &str, url: &str, body: &[u8]) -> Response {
        let start = Instant::now();
        let route = api::parse_route(method, url);
        let (response, served_version) = self.dispatch(&route, body);
        let latency_ns = start.elapsed().as_nanos() as u64;

        let c = &self.counters;
        c.requests.fetch_add(1, Ordering::Relaxed);
        match response.status {
            200..=399 => &c.ok,
            400..=499 => &c.client_errors,
            _ => &c.server_errors,
        }
        .fetch_add(1, Ordering::Relaxed);
        if let (Some(name), Some(v)) = (route.servable(), served_version) {
            let mut per = c.per_version.lock().unwrap();
            let e = per.entry((name.to_string(), v)).or_default();
            e.requests += 1;
            e.latency_ns_sum += latency_ns;
        }
        self.logger.log(
            route.endpoint(),
            route.servable(),
            served_version,
            body,
            response.status,
            latency_ns,
        );
        response
    }

    fn dispatch(&self, route: &Route, body: &[u8]) -> (Response, Option<u64>) {
        let result = match route {
            Route::Health => return (self.health(), None),
            Route::Metrics => {
                return (
                    Response {
                        status: 200,
                        content_type: "text/plain; charset=utf-8",
                        body: self.render_metrics(),
                    },
                    None,
                )
            }
            Route::ModelStatus { name } => self.model_status(name),
            Route::AdminStatus => Ok(self.admin_status()),
            Route::AdminAspire => self.admin_aspire(body),
            Route::Infer {
                name,
                version,
                verb,
            } => {
                let (result, served) = self.infer(name, *version, *verb, body);
                return (
                    match result {
                        Ok(v) => Response::json(200, v),
                        Err(e) => Response::error(&e),
                    },
                    served,
                );
            }
            Route::NotFound => Err(ApiError::new(404, "NotFound", "no such endpoint")),
            Route::MethodNotAllowed => Err(ApiError::new(405, "MethodNotAllowed", "method not allowed")),
        };
        let response = match result {
            Ok(v) => Response::json(200, v),
            Err(e) => Response::error(&e),
        };
        (response, None)
    }

    fn health(&self) -> Response {
        if self.is_ready() {
            Response::json(200, json!({"status": "ok"}))
        } else {
            Response::json(503, json!({"status": "starting"}))
        }
    }

    fn status_json(&self, name: &str) -> Option<Vec<VersionStatusJson>> {
        self.manager
            .status(name)
            .map(|list| list.iter().map(VersionStatusJson::from).collect())
    }

    fn model_status(&self, name: &str) -> Result<Value, ApiError> {
        let list = self
            .status_json(name)
            .ok_or_else(|| ApiError::new(404, "NotFound", format!("servable {name} not found")))?;
        Ok(serde_json::to_value(list).expect("status serializes"))
    }

    fn admin_status(&self) -> Value {
        let servables: BTreeMap<String, Vec<VersionStatusJson>> = self
            .manager
            .servable_names()
            .into_iter()
            .filter_map(|n| self.status_json(&n).map(|s| (n, s)))
            .collect();
        json!({"ready": self.is_ready(), "servables": servables})
    }

    fn admin_aspire(&self, body: &[u8]) -> Result<Value, ApiError> {
        let command = self.command.as_ref().ok_or_else(|| {
            ApiError::new(409, "FailedPrecondition", "server is not in command source mode")
        })?;
        let req: AspireRequest = serde_json::from_slice(body)
            .map_err(|e| ApiError::bad_request(format!("invalid aspire request: {e}")))?;
        let versions = req
            .versions
            .into_iter()
            .map(|v| AspiredVersion {
                version: v.version,
                data: PathBuf::from(v.path),
            })
            .collect();
        let list = AspiredVersionList::new(req.servable_name.clone(), versions)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        command.push(list);
        let status = self.status_json(&req.servable_name).unwrap_or_default();
        Ok(serde_json::to_value(status).expect("status serializes"))
    }

    fn infer(
        &self,
        name: &str,
        version: Option<u64>,
        verb: Verb,
        body: &[u8],
    ) -> (Result<Value, ApiError>, Option<u64>) {
        if !self.is_ready() {
            return (Err(ApiError::unavailable("server is starting")), None);
        }
        let spec = version.map_or(VersionSpec::Latest, VersionSpec::Exact);
        let handle = match self.manager.get_handle(name, spec) {
            Ok(h) => h,
            Err(e) => return (Err(e.into()), None),
        };
        let served = handle.version();
        let result = api::parse_json(body).and_then(|body| {
            if let Some(model) = handle.get::<AffineModel>() {
                self.infer_affine(&handle, model, verb, body)
            } else if let Some(table) = handle.get::<LookupTable>() {
                infer_lookup(table, verb, &body)
            } else {
                Err(ApiError::new(500, "Internal", "servable has an unsupported type"))
            }
        });
        drop(handle);
        (result, Some(served))
    }

    fn infer_affine(
        &self,
        handle: &ServableHandle,
        model: &AffineModel,
        verb: Verb,
        body: Value,
    ) -> Result<Value, ApiError> {
        match verb {
            Verb::Predict => {
                let rows = api::parse_numeric_instances(&body)?;
                let out = self.run_rows(handle, model, rows)?;
                Ok(json!({ "predictions": out }))
            }
            Verb::Classify => {
                model.class_labels().ok_or(ModelError::NotAClassifier)?;
                let examples = decode_batch_json(api::examples_value(body))?;
                let rows = model.rows_from_examples(&examples)?;
                let results = self
                    .run_rows(handle, model, rows)?
                    .iter()
                    .map(|logits| model.classification(logits))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(json!({ "results": results }))
            }
            Verb::Regress => {
                if model.out_dim() != 1 {
                    return Err(ModelError::NotARegressor(model.out_dim()).into());
                }
                let examples = decode_batch_json(api::examples_value(body))?;
                let rows = model.rows_from_examples(&examples)?;
                let out: Vec<f64> = self
                    .run_rows(handle, model, rows)?
                    .into_iter()
                    .map(|r| r[0])
                    .collect();
                Ok(json!({ "results": out }))
            }
        }
    }

    /// Runs rows through the version's batch queue if it has one, otherwise
    /// directly on this thread.
    fn run_rows(
        &self,
        handle: &ServableHandle,
        model: &AffineModel,
        rows: Rows,
    ) -> Result<Rows, ApiError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyBatch.into());
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != model.in_dim() {
                return Err(ModelError::ShapeMismatch {
                    row: i,
                    expected: model.in_dim(),
                    got: row.len(),
                }
                .into());
            }
        }
        if let Some(batcher) = &self.batcher {
            if let Some(queue) = batcher.queue(handle.id()) {
                let chunk = batcher.max_task_size(&handle.id().name);
                let mut pending = Vec::new();
                for part in rows.chunks(chunk) {
                    let task = PredictTask {
                        handle: handle.clone(),
                        rows: part.to_vec(),
                    };
                    match queue.enqueue(part.len(), task) {
                        Ok(p) => pending.push(p),
                        Err(BatchError::UnknownKey(_)) if pending.is_empty() => {
                            self.counters.unbatched_fallbacks.fetch_add(1, Ordering::Relaxed);
                            return Ok(model.predict(&rows)?);
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                let mut out = Vec::with_capacity(rows.len());
                for p in pending {
                    out.extend(p.wait()?);
                }
                return Ok(out);
            }
        }
        Ok(model.predict(&rows)?)
    }

    pub fn render_metrics(&self) -> String {
        let mut out = String::new();
        let c = &self.counters;
        let m = self.manager.metrics();
        let mut line = |k: &str, v: u64| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("ready", self.is_ready() as u64);
        line("initial_load_ms", self.initial_load_ms.load(Ordering::Relaxed));
        line("requests_total", c.requests.load(Ordering::Relaxed));
        line("responses_ok_total", c.ok.load(Ordering::Relaxed));
        line("responses_client_error_total", c.client_errors.load(Ordering::Relaxed));
        line("responses_server_error_total", c.server_errors.load(Ordering::Relaxed));
        line("manager_loads_total", m.loads);
        line("manager_load_failures_total", m.load_failures);
        line("manager_unloads_total", m.unloads);
        line("outstanding_handles", m.outstanding_handles as u64);
        line("snapshot_epoch", m.epoch);
        if let Some(b) = &self.batcher {
            let s = b.stats();
            line("batches_total", s.batches);
            line("batch_tasks_total", s.tasks);
            line("batch_items_total", s.items);
            line("batch_rejected_total", s.rejected);
            line("batch_unbatched_fallbacks_total", c.unbatched_fallbacks.load(Ordering::Relaxed));
        }
        let l = self.logger.stats();
        line("log_records_total", l.records);
        line("log_sampled_total", l.sampled);
        line("log_dropped_total", l.dropped);
        line("log_write_errors_total", l.write_errors);
        for ((name, version), v) in c.per_version.lock().unwrap().iter() {
            let _ = writeln!(
                out,
                "servable_requests_total{{name=\"{name}\",version=\"{version}\"}}={}",
                v.requests
            );
            let _ = writeln!(
                out,
                "servable_latency_ns_sum{{name=\"{name}\",version=\"{version}\"}}={}",
                v.latency_ns_sum
            );
        }
        out
    }
}

fn infer_lookup(table: &LookupTable, verb: Verb, body: &Value) -> Result<Value, ApiError> {
    if verb != Verb::Predict {
        return Err(ApiError::bad_request(format!(
            "lookup tables only support predict, not {}",
            verb.as_str()
        )));
    }
    let keys = api::parse_key_instances(body)?;
    let values: Vec<Option<String>> = table
        .lookup(&keys)
        .into_iter()
        .map(|r| r.ok().map(|v| String::from_utf8_lossy(&v).into_owned()))
        .collect();
    Ok(json!({ "predictions": values }))
}

/// Parses `name=value` lines from [`Service::render_metrics`].
pub fn parse_metrics(text: &str) -> BTreeMap<String, u64> {
    text.lines()
        .filter_map(|l| l.rsplit_once('='))
        .filter_map(|(k, v)| v.trim().parse().ok().map(|v| (k.to_string(), v)))
        .collect()
}
