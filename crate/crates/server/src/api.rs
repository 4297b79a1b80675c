//! Transport-independent request routing and wire types.

use modelserve_core::batching::BatchError;
use modelserve_core::manager::{HandleError, VersionStatus};
use modelserve_core::models::ModelError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Predict,
    Classify,
    Regress,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Predict => "predict",
            Verb::Classify => "classify",
            Verb::Regress => "regress",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    ModelStatus { name: String },
    Infer {
        name: String,
        version: Option<u64>,
        verb: Verb,
    },
    Health,
    Metrics,
    AdminAspire,
    AdminStatus,
    NotFound,
    MethodNotAllowed,
}

impl Route {
    /// Short endpoint label used in logs and metrics.
    pub fn endpoint(&self) -> &'static str {
        match self {
            Route::ModelStatus { .. } => "model_status",
            Route::Infer { verb, .. } => verb.as_str(),
            Route::Health => "healthz",
            Route::Metrics => "metrics",
            Route::AdminAspire => "admin_aspire",
            Route::AdminStatus => "admin_status",
            Route::NotFound => "not_found",
            Route::MethodNotAllowed => "method_not_allowed",
        }
    }

    pub fn servable(&self) -> Option<&str> {
        match self {
            Route::ModelStatus { name } | Route::Infer { name, .. } => Some(name),
            _ => None,
        }
    }
}

fn parse_verb(s: &str) -> Option<Verb> {
    match s {
        "predict" => Some(Verb::Predict),
        "classify" => Some(Verb::Classify),
        "regress" => Some(Verb::Regress),
        _ => None,
    }
}

fn plain_segment(s: &str) -> bool {
    !s.is_empty() && !s.contains(['/', ':'])
}

pub fn parse_route(method: &str, url: &str) -> Route {
    let path = url.split(['?', '#']).next().unwrap_or("");
    let path = path.strip_suffix('/').filter(|p| !p.is_empty()).unwrap_or(path);
    let get = method.eq_ignore_ascii_case("GET");
    let post = method.eq_ignore_ascii_case("POST");
    let require = |ok: bool, route: Route| if ok { route } else { Route::MethodNotAllowed };

    match path {
        "/healthz" => return require(get, Route::Health),
        "/metrics" => return require(get, Route::Metrics),
        "/v1/admin/aspire" => return require(post, Route::AdminAspire),
        "/v1/admin/status" => return require(get, Route::AdminStatus),
        _ => {}
    }
    let Some(rest) = path.strip_prefix("/v1/models/") else {
        return Route::NotFound;
    };

    if let Some((target, verb)) = rest.rsplit_once(':') {
        let Some(verb) = parse_verb(verb) else {
            return Route::NotFound;
        };
        let (name, version) = match target.split_once("/versions/") {
            Some((name, v)) => match v.parse::<u64>() {
                Ok(v) => (name, Some(v)),
                Err(_) => return Route::NotFound,
            },
            None => (target, None),
        };
        if !plain_segment(name) {
            return Route::NotFound;
        }
        return require(
            post,
            Route::Infer {
                name: name.to_string(),
                version,
                verb,
            },
        );
    }
    if plain_segment(rest) {
        return require(get, Route::ModelStatus { name: rest.to_string() });
    }
    Route::NotFound
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "InvalidArgument", message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(503, "Unavailable", message)
    }

    pub fn body(&self) -> String {
        json!({"error": self.message, "code": self.code}).to_string()
    }
}

impl From<HandleError> for ApiError {
    fn from(e: HandleError) -> Self {
        let code = match e {
            HandleError::NotFound(_) => "NotFound",
            HandleError::VersionNotFound { .. } => "VersionNotFound",
        };
        ApiError::new(404, code, e.to_string())
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let (status, code) = match e {
            ModelError::ShapeMismatch { .. } => (400, "ShapeMismatch"),
            ModelError::MissingFeature(_) => (400, "MissingFeature"),
            ModelError::InvalidFeature(_) => (400, "InvalidFeature"),
            ModelError::NotAClassifier => (400, "NotAClassifier"),
            ModelError::NotARegressor(_) => (400, "NotARegressor"),
            ModelError::EmptyBatch => (400, "EmptyBatch"),
            ModelError::MalformedBatch(_) => (400, "MalformedBatch"),
            ModelError::InvalidModel(_) => (500, "Internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<BatchError> for ApiError {
    fn from(e: BatchError) -> Self {
        match e {
            BatchError::QueueFull => ApiError::new(503, "QueueFull", e.to_string()),
            BatchError::Cancelled => ApiError::new(503, "Unavailable", e.to_string()),
            _ => ApiError::new(500, "Internal", e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionStatusJson {
    pub version: u64,
    pub state: String,
    pub is_aspired: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_message: Option<String>,
}

impl From<&VersionStatus> for VersionStatusJson {
    fn from(s: &VersionStatus) -> Self {
        Self {
            version: s.version,
            state: s.state.name().to_string(),
            is_aspired: s.is_aspired,
            error_message: s.state.error_message().map(str::to_string),
        }
    }
}

/// Body of `POST /v1/admin/aspire`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspireRequest {
    pub servable_name: String,
    pub versions: Vec<AspireVersion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspireVersion {
    pub version: u64,
    pub path: std::path::PathBuf,
}

pub fn parse_json(body: &[u8]) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))
}

/// `{"instances": [[f64, ..], ..]}` for affine models.
pub fn parse_numeric_instances(body: &Value) -> Result<Vec<Vec<f64>>, ApiError> {
    let instances = body
        .get("instances")
        .ok_or_else(|| ApiError::bad_request("body needs an \"instances\" array"))?;
    serde_json::from_value(instances.clone())
        .map_err(|e| ApiError::bad_request(format!("instances must be arrays of numbers: {e}")))
}

/// `{"instances": ["key", ..]}` for lookup tables.
pub fn parse_key_instances(body: &Value) -> Result<Vec<String>, ApiError> {
    let instances = body
        .get("instances")
        .ok_or_else(|| ApiError::bad_request("body needs an \"instances\" array"))?;
    serde_json::from_value(instances.clone())
        .map_err(|e| ApiError::bad_request(format!("instances must be strings: {e}")))
}

/// The examples of a classify or regress body: either the batch itself
/// (array or compressed object) or an object wrapping it in `"examples"`.
pub fn examples_value(body: Value) -> Value {
    match body {
        Value::Object(mut map) if map.contains_key("examples") => {
            map.remove("examples").expect("checked")
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn infer(name: &str, version: Option<u64>, verb: Verb) -> Route {
        Route::Infer {
            name: name.into(),
            version,
            verb,
        }
    }

    #[test]
    fn routes() {
        assert_eq!(parse_route("POST", "/v1/models/m:predict"), infer("m", None, Verb::Predict));
        assert_eq!(
            parse_route("POST", "/v1/models/m/versions/7:classify?x=1"),
            infer("m", Some(7), Verb::Classify)
        );
        assert_eq!(parse_route("POST", "/v1/models/m:regress"), infer("m", None, Verb::Regress));
        assert_eq!(
            parse_route("GET", "/v1/models/m"),
            Route::ModelStatus { name: "m".into() }
        );
        assert_eq!(parse_route("GET", "/healthz"), Route::Health);
        assert_eq!(parse_route("GET", "/metrics"), Route::Metrics);
        assert_eq!(parse_route("POST", "/v1/admin/aspire"), Route::AdminAspire);
        assert_eq!(parse_route("GET", "/v1/admin/status"), Route::AdminStatus);
    }

    #[test]
    fn rejected_routes() {
        assert_eq!(parse_route("GET", "/v1/models/m:predict"), Route::MethodNotAllowed);
        assert_eq!(parse_route("POST", "/healthz"), Route::MethodNotAllowed);
        assert_eq!(parse_route("POST", "/v1/models/m:explain"), Route::NotFound);
        assert_eq!(parse_route("POST", "/v1/models/m/versions/x:predict"), Route::NotFound);
        assert_eq!(parse_route("POST", "/v1/models/:predict"), Route::NotFound);
        assert_eq!(parse_route("GET", "/v1/models/a/b"), Route::NotFound);
        assert_eq!(parse_route("GET", "/"), Route::NotFound);
    }

    #[test]
    fn error_statuses() {
        assert_eq!(ApiError::from(HandleError::NotFound("m".into())).status, 404);
        assert_eq!(ApiError::from(ModelError::NotAClassifier).status, 400);
        assert_eq!(ApiError::from(ModelError::InvalidModel("x".into())).status, 500);
        assert_eq!(ApiError::from(BatchError::QueueFull).status, 503);
        let body: Value = serde_json::from_str(&ApiError::bad_request("nope").body()).unwrap();
        assert_eq!(body["error"], "nope");
    }

    #[test]
    fn instance_parsing() {
        let v: Value = serde_json::from_str(r#"{"instances": [[1, 2.5]]}"#).unwrap();
        assert_eq!(parse_numeric_instances(&v).unwrap(), vec![vec![1.0, 2.5]]);
        let v: Value = serde_json::from_str(r#"{"instances": [["a"]]}"#).unwrap();
        assert!(parse_numeric_instances(&v).is_err());
        let v: Value = serde_json::from_str(r#"{"instances": ["a", "b"]}"#).unwrap();
        assert_eq!(parse_key_instances(&v).unwrap(), vec!["a", "b"]);
        let wrapped: Value = serde_json::from_str(r#"{"examples": [{}]}"#).unwrap();
        assert!(examples_value(wrapped).is_array());
    }
}
