use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ram::DEFAULT_OVERHEAD_FACTOR;
use crate::FleetError;

/// A serving job: a group of identical replicas sharing one RAM budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub id: String,
    pub ram_capacity: u64,
    /// Base URLs such as `http://127.0.0.1:8500`.
    pub replicas: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HedgePolicy {
    pub hedge_delay_ms: u64,
    /// Hedges allowed as a running fraction of all routed requests.
    pub max_hedged_fraction: f64,
    pub overall_deadline_ms: u64,
    /// Hedges allowed beyond the fraction, absorbing short bursts early on.
    pub budget_burst: u64,
}

impl Default for HedgePolicy {
    fn default() -> Self {
        Self {
            hedge_delay_ms: 20,
            max_hedged_fraction: 0.05,
            overall_deadline_ms: 1000,
            budget_burst: 10,
        }
    }
}

impl HedgePolicy {
    pub fn disabled() -> Self {
        Self {
            max_hedged_fraction: 0.0,
            budget_burst: 0,
            ..Self::default()
        }
    }

    pub fn hedge_delay(&self) -> Duration {
        Duration::from_millis(self.hedge_delay_ms)
    }

    pub fn overall_deadline(&self) -> Duration {
        Duration::from_millis(self.overall_deadline_ms)
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        if self.hedge_delay_ms >= self.overall_deadline_ms {
            return Err(FleetError::InvalidConfig(format!(
                "hedge_delay_ms ({}) must be below overall_deadline_ms ({})",
                self.hedge_delay_ms, self.overall_deadline_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.max_hedged_fraction) {
            return Err(FleetError::InvalidConfig(
                "max_hedged_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Fleet config file (TOML):
///
/// ```toml
/// overhead_factor = 1.25
///
/// [hedge]
/// hedge_delay_ms = 20
///
/// [[job]]
/// id = "small"
/// ram_capacity = 1_000_000
/// replicas = ["http://127.0.0.1:8501", "http://127.0.0.1:8502"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    #[serde(rename = "job", default)]
    pub jobs: Vec<JobSpec>,
    #[serde(default = "default_factor")]
    pub overhead_factor: f64,
    #[serde(default)]
    pub hedge: HedgePolicy,
}

fn default_factor() -> f64 {
    DEFAULT_OVERHEAD_FACTOR
}

impl FleetConfig {
    pub fn new(jobs: Vec<JobSpec>) -> Result<Self, FleetError> {
        let config = Self {
            jobs,
            overhead_factor: DEFAULT_OVERHEAD_FACTOR,
            hedge: HedgePolicy::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, FleetError> {
        let config: Self =
            toml::from_str(text).map_err(|e| FleetError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, FleetError> {
        let text = std::fs::read_to_string(path).map_err(|source| FleetError::PathUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        let mut seen = std::collections::BTreeSet::new();
        for job in &self.jobs {
            if !seen.insert(&job.id) {
                return Err(FleetError::InvalidConfig(format!("duplicate job id {:?}", job.id)));
            }
            if job.replicas.is_empty() {
                return Err(FleetError::InvalidConfig(format!("job {:?} has no replicas", job.id)));
            }
        }
        if !(self.overhead_factor.is_finite() && self.overhead_factor > 0.0) {
            return Err(FleetError::InvalidConfig("overhead_factor must be positive".into()));
        }
        self.hedge.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_form() {
        let c = FleetConfig::from_toml_str(
            "[hedge]\nhedge_delay_ms = 5\n[[job]]\nid = \"a\"\nram_capacity = 100\nreplicas = [\"h:1\"]\n",
        )
        .unwrap();
        assert_eq!(c.jobs[0].ram_capacity, 100);
        assert_eq!(c.hedge.hedge_delay_ms, 5);
        assert_eq!(c.hedge.max_hedged_fraction, 0.05);
        assert_eq!(c.overhead_factor, 1.25);
    }

    #[test]
    fn rejects_bad_configs() {
        let job = |id: &str, replicas: Vec<String>| JobSpec {
            id: id.into(),
            ram_capacity: 1,
            replicas,
        };
        assert!(FleetConfig::new(vec![job("a", vec![])]).is_err());
        assert!(FleetConfig::new(vec![job("a", vec!["x".into()]), job("a", vec!["y".into()])]).is_err());
        assert!(FleetConfig::from_toml_str("[hedge]\nhedge_delay_ms = 2000\n").is_err());
        assert!(FleetConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
