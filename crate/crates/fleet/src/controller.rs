use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use modelserve_core::sources::{scan_versions, VersionSelection};
use serde::{Deserialize, Serialize};

use crate::config::{FleetConfig, JobSpec};
use crate::journal::{Journal, JournalEntry};
use crate::ram::estimate_ram;
use crate::FleetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryConfig {
    pub canary_version: u64,
    pub tee_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    /// Storage directory whose numeric children are versions.
    pub path: PathBuf,
    pub selection: VersionSelection,
    /// Versions registered with the controller.
    pub versions: BTreeSet<u64>,
    pub estimated_ram: u64,
    pub assignment: Option<String>,
    pub canary: Option<CanaryConfig>,
}

impl ModelRecord {
    pub fn version_path(&self, version: u64) -> PathBuf {
        self.path.join(version.to_string())
    }
}

/// A journaled state change. Anything nondeterministic (directory scans,
/// RAM estimates, placement) is resolved before the command is written, so
/// replay never touches the filesystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    AddModel {
        name: String,
        path: PathBuf,
        selection: VersionSelection,
        versions: Vec<u64>,
        estimated_ram: u64,
    },
    RemoveModel {
        name: String,
    },
    AddVersion {
        name: String,
        version: u64,
    },
    SetSelection {
        name: String,
        selection: VersionSelection,
        canary: Option<CanaryConfig>,
    },
    Assign {
        name: String,
        job: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub models: BTreeMap<String, ModelRecord>,
    /// Sequence number of the last applied command.
    pub seq: u64,
}

/// Index of the first job, in declaration order, with `ram` bytes free.
pub fn first_fit(capacities: &[u64], usage: &[u64], ram: u64) -> Option<usize> {
    capacities
        .iter()
        .zip(usage)
        .position(|(&cap, &used)| cap.saturating_sub(used) >= ram)
}

impl ControllerState {
    pub fn usage(&self, jobs: &[JobSpec]) -> Vec<u64> {
        jobs.iter()
            .map(|j| {
                self.models
                    .values()
                    .filter(|m| m.assignment.as_deref() == Some(j.id.as_str()))
                    .map(|m| m.estimated_ram)
                    .sum()
            })
            .collect()
    }

    /// No job holds more assigned RAM than its capacity.
    pub fn capacity_safe(&self, jobs: &[JobSpec]) -> bool {
        self.usage(jobs)
            .iter()
            .zip(jobs)
            .all(|(&used, j)| used <= j.ram_capacity)
            && self
                .models
                .values()
                .filter_map(|m| m.assignment.as_ref())
                .all(|a| jobs.iter().any(|j| &j.id == a))
    }

    fn model_mut(&mut self, name: &str) -> Result<&mut ModelRecord, FleetError> {
        self.models
            .get_mut(name)
            .ok_or_else(|| FleetError::UnknownModel(name.to_string()))
    }

    /// Applies one command, leaving the state untouched on error.
    pub fn apply(&mut self, command: &Command, jobs: &[JobSpec]) -> Result<(), FleetError> {
        match command {
            Command::AddModel {
                name,
                path,
                selection,
                versions,
                estimated_ram,
            } => {
                if self.models.contains_key(name) {
                    return Err(FleetError::DuplicateModel(name.clone()));
                }
                self.models.insert(
                    name.clone(),
                    ModelRecord {
                        name: name.clone(),
                        path: path.clone(),
                        selection: selection.clone(),
                        versions: versions.iter().copied().collect(),
                        estimated_ram: *estimated_ram,
                        assignment: None,
                        canary: None,
                    },
                );
            }
            Command::RemoveModel { name } => {
                self.models
                    .remove(name)
                    .ok_or_else(|| FleetError::UnknownModel(name.clone()))?;
            }
            Command::AddVersion { name, version } => {
                let m = self.model_mut(name)?;
                if !m.versions.insert(*version) {
                    return Err(FleetError::InvalidVersion {
                        model: name.clone(),
                        version: *version,
                        reason: "already registered".into(),
                    });
                }
            }
            Command::SetSelection {
                name,
                selection,
                canary,
            } => {
                let m = self.model_mut(name)?;
                if let VersionSelection::Specific(vs) = selection {
                    if let Some(v) = vs.iter().find(|v| !m.versions.contains(v)) {
                        return Err(FleetError::InvalidVersion {
                            model: name.clone(),
                            version: *v,
                            reason: "not registered".into(),
                        });
                    }
                }
                if let Some(c) = canary {
                    if !m.versions.contains(&c.canary_version) {
                        return Err(FleetError::InvalidVersion {
                            model: name.clone(),
                            version: c.canary_version,
                            reason: "not registered".into(),
                        });
                    }
                    if !(0.0..=1.0).contains(&c.tee_fraction) {
                        return Err(FleetError::InvalidConfig(format!(
                            "tee fraction {} is outside [0, 1]",
                            c.tee_fraction
                        )));
                    }
                }
                m.selection = selection.clone();
                m.canary = canary.clone();
            }
            Command::Assign { name, job } => {
                let idx = jobs
                    .iter()
                    .position(|j| &j.id == job)
                    .ok_or_else(|| FleetError::InvalidConfig(format!("unknown job {job:?}")))?;
                let usage = self.usage(jobs);
                let m = self
                    .models
                    .get(name)
                    .ok_or_else(|| FleetError::UnknownModel(name.clone()))?;
                let freed = if m.assignment.as_deref() == Some(job.as_str()) {
                    m.estimated_ram
                } else {
                    0
                };
                if usage[idx] - freed + m.estimated_ram > jobs[idx].ram_capacity {
                    return Err(FleetError::NoCapacity {
                        model: name.clone(),
                        ram: m.estimated_ram,
                    });
                }
                self.model_mut(name)?.assignment = Some(job.clone());
            }
        }
        self.seq += 1;
        Ok(())
    }

    /// Folds journal entries from the empty state.
    pub fn replay(entries: &[JournalEntry], jobs: &[JobSpec]) -> Result<Self, FleetError> {
        let mut state = Self::default();
        for e in entries {
            state.apply(&e.command, jobs).map_err(|err| FleetError::Journal {
                path: PathBuf::new(),
                message: format!("entry {} does not apply: {err}", e.seq),
            })?;
        }
        Ok(state)
    }
}

/// Single writer over the journal. Every change is journaled before it
/// becomes visible in [`Controller::state`].
#[derive(Debug)]
pub struct Controller {
    config: FleetConfig,
    state: ControllerState,
    journal: Journal,
}

impl Controller {
    pub fn open(journal_path: &Path, config: FleetConfig) -> Result<Self, FleetError> {
        config.validate()?;
        let (journal, entries) = Journal::open(journal_path)?;
        let state = ControllerState::replay(&entries, &config.jobs).map_err(|e| match e {
            FleetError::Journal { message, .. } => FleetError::Journal {
                path: journal_path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        Ok(Self {
            config,
            state,
            journal,
        })
    }

    pub fn config(&self) -> &FleetConfig {
        &self.config
    }

    pub fn jobs(&self) -> &[JobSpec] {
        &self.config.jobs
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn journal_path(&self) -> &Path {
        self.journal.path()
    }

    /// Validates against a copy, journals, then publishes.
    pub fn execute(&mut self, command: Command) -> Result<u64, FleetError> {
        let mut next = self.state.clone();
        next.apply(&command, &self.config.jobs)?;
        let seq = self.journal.append(&command)?;
        debug_assert_eq!(seq, next.seq);
        self.state = next;
        Ok(seq)
    }

    /// Registers a model and places it on the first job with room. On
    /// `NoCapacity` the model stays registered but unassigned.
    pub fn add_model(
        &mut self,
        name: &str,
        path: &Path,
        selection: VersionSelection,
    ) -> Result<String, FleetError> {
        if self.state.models.contains_key(name) {
            return Err(FleetError::DuplicateModel(name.to_string()));
        }
        let scan = scan_versions(path).map_err(|e| FleetError::PathUnreadable {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
        let versions: Vec<u64> = scan.version_set().into_iter().collect();
        let mut estimated_ram = 0;
        for v in &versions {
            estimated_ram = estimated_ram.max(estimate_ram(
                &path.join(v.to_string()),
                self.config.overhead_factor,
            )?);
        }
        self.execute(Command::AddModel {
            name: name.to_string(),
            path: path.to_path_buf(),
            selection,
            versions,
            estimated_ram,
        })?;
        self.place(name)
    }

    /// First-fit placement of an unassigned model.
    pub fn place(&mut self, name: &str) -> Result<String, FleetError> {
        let model = self
            .state
            .models
            .get(name)
            .ok_or_else(|| FleetError::UnknownModel(name.to_string()))?;
        if let Some(job) = &model.assignment {
            return Ok(job.clone());
        }
        let ram = model.estimated_ram;
        let capacities: Vec<u64> = self.config.jobs.iter().map(|j| j.ram_capacity).collect();
        let idx = first_fit(&capacities, &self.state.usage(&self.config.jobs), ram).ok_or(
            FleetError::NoCapacity {
                model: name.to_string(),
                ram,
            },
        )?;
        let job = self.config.jobs[idx].id.clone();
        self.execute(Command::Assign {
            name: name.to_string(),
            job: job.clone(),
        })?;
        Ok(job)
    }

    pub fn remove_model(&mut self, name: &str) -> Result<u64, FleetError> {
        self.execute(Command::RemoveModel {
            name: name.to_string(),
        })
    }

    /// Registers a version whose directory exists under the model's path.
    pub fn add_version(&mut self, name: &str, version: u64) -> Result<u64, FleetError> {
        let model = self
            .state
            .models
            .get(name)
            .ok_or_else(|| FleetError::UnknownModel(name.to_string()))?;
        if !model.version_path(version).is_dir() {
            return Err(FleetError::InvalidVersion {
                model: name.to_string(),
                version,
                reason: format!("{} is not a directory", model.version_path(version).display()),
            });
        }
        self.execute(Command::AddVersion {
            name: name.to_string(),
            version,
        })
    }

    /// Pins the model to `version` and ends any canary.
    pub fn rollback(&mut self, name: &str, version: u64) -> Result<u64, FleetError> {
        self.execute(Command::SetSelection {
            name: name.to_string(),
            selection: VersionSelection::Specific(vec![version]),
            canary: None,
        })
    }

    /// Serves the two newest versions and tees `fraction` of traffic to
    /// `version`, which must be the newest registered one.
    pub fn canary(&mut self, name: &str, version: u64, fraction: f64) -> Result<u64, FleetError> {
        let model = self
            .state
            .models
            .get(name)
            .ok_or_else(|| FleetError::UnknownModel(name.to_string()))?;
        if model.versions.last() != Some(&version) {
            return Err(FleetError::InvalidVersion {
                model: name.to_string(),
                version,
                reason: "a canary must be the newest registered version".into(),
            });
        }
        self.execute(Command::SetSelection {
            name: name.to_string(),
            selection: VersionSelection::Latest(2),
            canary: Some(CanaryConfig {
                canary_version: version,
                tee_fraction: fraction,
            }),
        })
    }
}
