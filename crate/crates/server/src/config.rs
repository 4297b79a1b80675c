use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use modelserve_core::batching::BatchingConfig;
use modelserve_core::sources::SourceConfig;
use modelserve_core::{Loader, ManagerConfig, ServableId};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceMode {
    /// Poll `model_config` base paths for version directories.
    Filesystem,
    /// Versions arrive through `POST /v1/admin/aspire`.
    Command,
}

impl FromStr for SourceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "filesystem" => Ok(SourceMode::Filesystem),
            "command" => Ok(SourceMode::Command),
            other => Err(format!("unknown source mode {other:?} (expected filesystem or command)")),
        }
    }
}

/// Batching settings: a default plus per-servable overrides.
///
/// In the TOML form the top-level keys are the default and each
/// `[servables.<name>]` table overrides it for one servable.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchingSettings {
    pub default: BatchingConfig,
    pub per_servable: BTreeMap<String, BatchingConfig>,
}

impl BatchingSettings {
    pub fn for_servable(&self, name: &str) -> &BatchingConfig {
        self.per_servable.get(name).unwrap_or(&self.default)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let overrides = table.remove("servables");
        let default: BatchingConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        let mut per_servable = BTreeMap::new();
        if let Some(overrides) = overrides {
            let toml::Value::Table(overrides) = overrides else {
                return Err(ConfigError::Invalid("servables must be a table".into()));
            };
            for (name, value) in overrides {
                let config: BatchingConfig = value
                    .try_into()
                    .map_err(|e: toml::de::Error| ConfigError::Invalid(format!("{name}: {e}")))?;
                per_servable.insert(name, config);
            }
        }
        let settings = Self {
            default,
            per_servable,
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.default
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, c) in &self.per_servable {
            c.validate()
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

/// Builds loaders for version directories in place of the on-disk formats.
pub type LoaderFactory = Arc<dyn Fn(&ServableId, PathBuf) -> Box<dyn Loader> + Send + Sync>;

#[derive(Clone)]
pub struct ServerConfig {
    /// 0 picks a free port.
    pub port: u16,
    pub model_config: SourceConfig,
    pub manager: ManagerConfig,
    pub batching: Option<BatchingSettings>,
    pub source_mode: SourceMode,
    pub log_sample_rate: f64,
    pub log_path: Option<PathBuf>,
    pub log_seed: u64,
    pub http_threads: usize,
    pub loader_factory: Option<LoaderFactory>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            port: 8500,
            model_config: SourceConfig::default(),
            manager: ManagerConfig::default(),
            batching: None,
            source_mode: SourceMode::Filesystem,
            log_sample_rate: 0.0,
            log_path: None,
            log_seed: 0,
            http_threads: 8,
            loader_factory: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.log_sample_rate) {
            return Err(ConfigError::Invalid(format!(
                "log_sample_rate must be in [0, 1], got {}",
                self.log_sample_rate
            )));
        }
        if self.http_threads == 0 {
            return Err(ConfigError::Invalid("http_threads must be positive".into()));
        }
        self.model_config
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(b) = &self.batching {
            b.validate()?;
        }
        Ok(())
    }
}

impl fmt::Debug for ServerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerConfig")
            .field("port", &self.port)
            .field("model_config", &self.model_config)
            .field("manager", &self.manager)
            .field("batching", &self.batching)
            .field("source_mode", &self.source_mode)
            .field("log_sample_rate", &self.log_sample_rate)
            .field("log_path", &self.log_path)
            .field("http_threads", &self.http_threads)
            .field("loader_factory", &self.loader_factory.is_some())
            .finish()
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_file_with_overrides() {
        let s = BatchingSettings::from_toml_str(
            "max_batch_size = 16\n[servables.big]\nmax_batch_size = 64\nnum_batch_threads = 2\n",
        )
        .unwrap();
        assert_eq!(s.default.max_batch_size, 16);
        assert_eq!(s.for_servable("big").max_batch_size, 64);
        assert_eq!(s.for_servable("other").max_batch_size, 16);
        assert!(BatchingSettings::from_toml_str("max_batch_size = 0").is_err());
        assert!(BatchingSettings::from_toml_str("[servables.x]\nbogus = 1").is_err());
    }

    #[test]
    fn sample_rate_range() {
        let mut c = ServerConfig::default();
        assert!(c.validate().is_ok());
        c.log_sample_rate = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn source_modes() {
        assert_eq!("command".parse(), Ok(SourceMode::Command));
        assert!("rpc".parse::<SourceMode>().is_err());
    }
}
