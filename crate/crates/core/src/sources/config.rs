use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::SourceError;
use crate::models::ModelFormat;
use crate::servable::is_valid_servable_name;

/// Which discovered versions a Source aspires.
///
/// Text form: `latest`, `latest:N`, `specific:V1,V2,...`, `all`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VersionSelection {
    Latest(usize),
    Specific(Vec<u64>),
    All,
}

impl Default for VersionSelection {
    fn default() -> Self {
        VersionSelection::Latest(1)
    }
}

impl fmt::Display for VersionSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionSelection::Latest(n) => write!(f, "latest:{n}"),
            VersionSelection::All => f.write_str("all"),
            VersionSelection::Specific(vs) => {
                let list: Vec<String> = vs.iter().map(u64::to_string).collect();
                write!(f, "specific:{}", list.join(","))
            }
        }
    }
}

impl FromStr for VersionSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("latest", None) => Ok(VersionSelection::Latest(1)),
            ("latest", Some(n)) => match n.parse::<usize>() {
                Ok(n) if n > 0 => Ok(VersionSelection::Latest(n)),
                _ => Err(format!("latest:N needs a positive integer, got {n:?}")),
            },
            ("all", None) => Ok(VersionSelection::All),
            ("specific", Some(list)) => {
                let versions = list
                    .split(',')
                    .map(|v| v.trim().parse::<u64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| format!("bad version in {list:?}: {e}"))?;
                if versions.is_empty() {
                    return Err("specific needs at least one version".into());
                }
                Ok(VersionSelection::Specific(versions))
            }
            _ => Err(format!("unknown version selection {s:?}")),
        }
    }
}

impl TryFrom<String> for VersionSelection {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<VersionSelection> for String {
    fn from(value: VersionSelection) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub name: String,
    /// Directory whose numeric children are the versions of `name`.
    pub base_path: PathBuf,
    #[serde(default)]
    pub selection: VersionSelection,
    #[serde(default = "default_format")]
    pub format: ModelFormat,
}

fn default_format() -> ModelFormat {
    ModelFormat::Affine
}

impl SourceEntry {
    pub fn new(name: impl Into<String>, base_path: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            base_path: base_path.into(),
            selection: VersionSelection::default(),
            format: default_format(),
        }
    }

    pub fn with_selection(mut self, selection: VersionSelection) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_format(mut self, format: ModelFormat) -> Self {
        self.format = format;
        self
    }
}

/// Servable/directory pairs polled by a [`super::FileSystemSource`].
///
/// File form (TOML):
///
/// ```toml
/// poll_interval_s = 1.0
///
/// [[model]]
/// name = "ranker"
/// base_path = "/models/ranker"
/// selection = "latest:2"     # optional, default latest:1
/// format = "affine"          # affine | lookup_table | auto
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    #[serde(rename = "model", default)]
    pub entries: Vec<SourceEntry>,
    #[serde(default = "default_poll_interval_s")]
    pub poll_interval_s: f64,
}

fn default_poll_interval_s() -> f64 {
    1.0
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            poll_interval_s: default_poll_interval_s(),
        }
    }
}

impl SourceConfig {
    pub fn new(entries: Vec<SourceEntry>) -> Result<Self, SourceError> {
        let config = Self {
            entries,
            ..Self::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SourceError> {
        let config: Self =
            toml::from_str(text).map_err(|e| SourceError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_secs_f64(self.poll_interval_s)
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if !(self.poll_interval_s.is_finite() && self.poll_interval_s > 0.0) {
            return Err(SourceError::InvalidConfig(format!(
                "poll_interval_s must be positive, got {}",
                self.poll_interval_s
            )));
        }
        let mut names = HashSet::new();
        for e in &self.entries {
            if !is_valid_servable_name(&e.name) {
                return Err(SourceError::InvalidConfig(format!(
                    "invalid servable name {:?}",
                    e.name
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(SourceError::InvalidConfig(format!(
                    "servable {:?} configured twice",
                    e.name
                )));
            }
            if let VersionSelection::Latest(0) = e.selection {
                return Err(SourceError::InvalidConfig("latest:0 selects nothing".into()));
            }
        }
        Ok(())
    }
}
