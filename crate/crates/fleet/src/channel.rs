use std::collections::BTreeMap;
use std::time::Duration;

use modelserve_server::api::{AspireRequest, VersionStatusJson};
use serde::Deserialize;

/// Per-servable version statuses as one server reports them.
pub type ServerStatus = BTreeMap<String, Vec<VersionStatusJson>>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{endpoint}: {message}")]
pub struct TransportError {
    pub endpoint: String,
    pub message: String,
}

/// How the synchronizer talks to serving replicas.
pub trait ServerChannel: Send + Sync {
    fn status(&self, endpoint: &str) -> Result<ServerStatus, TransportError>;

    /// Sends one full aspired list; the reply is that servable's statuses.
    fn push(
        &self,
        endpoint: &str,
        request: &AspireRequest,
    ) -> Result<Vec<VersionStatusJson>, TransportError>;
}

/// Talks to servers run with `--source_mode=command`.
#[derive(Clone)]
pub struct HttpChannel {
    agent: ureq::Agent,
}

impl Default for HttpChannel {
    fn default() -> Self {
        Self::new(Duration::from_secs(5))
    }
}

pub(crate) fn base_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.starts_with("http://") || trimmed.starts_with("https://") {
        trimmed.to_string()
    } else {
        format!("http://{trimmed}")
    }
}

#[derive(Deserialize)]
struct AdminStatus {
    servables: ServerStatus,
}

impl HttpChannel {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn err(endpoint: &str, e: impl std::fmt::Display) -> TransportError {
        TransportError {
            endpoint: endpoint.to_string(),
            message: e.to_string(),
        }
    }
}

impl ServerChannel for HttpChannel {
    fn status(&self, endpoint: &str) -> Result<ServerStatus, TransportError> {
        let resp = self
            .agent
            .get(&format!("{}/v1/admin/status", base_url(endpoint)))
            .call()
            .map_err(|e| Self::err(endpoint, e))?;
        let status: AdminStatus = resp.into_json().map_err(|e| Self::err(endpoint, e))?;
        Ok(status.servables)
    }

    fn push(
        &self,
        endpoint: &str,
        request: &AspireRequest,
    ) -> Result<Vec<VersionStatusJson>, TransportError> {
        let body = serde_json::to_string(request).expect("aspire requests serialize");
        let resp = self
            .agent
            .post(&format!("{}/v1/admin/aspire", base_url(endpoint)))
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map_err(|e| Self::err(endpoint, e))?;
        resp.into_json().map_err(|e| Self::err(endpoint, e))
    }
}
