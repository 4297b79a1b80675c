use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crossbeam_channel::{RecvTimeoutError, Sender};
use log::warn;

use super::{SourceConfig, SourceError, VersionSelection};
use crate::servable::{AspiredVersionList, AspiredVersionsSink};

/// Parses a version directory name: base-10 digits only, leading zeros
/// allowed.
pub fn parse_version_dir(name: &str) -> Option<u64> {
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    name.parse().ok()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanResult {
    /// Version number to the directory it was found in.
    pub versions: BTreeMap<u64, PathBuf>,
    pub warnings: Vec<String>,
}

impl ScanResult {
    pub fn version_set(&self) -> BTreeSet<u64> {
        self.versions.keys().copied().collect()
    }
}

/// Lists the numeric child directories of `base_path`. Anything else is
/// skipped with a warning.
pub fn scan_versions(base_path: &Path) -> Result<ScanResult, SourceError> {
    let unreadable = |e: std::io::Error| SourceError::PathUnreadable {
        path: base_path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut result = ScanResult::default();
    for entry in fs::read_dir(base_path).map_err(unreadable)? {
        let entry = entry.map_err(unreadable)?;
        let file_name = entry.file_name();
        let name = file_name.to_string_lossy();
        let Some(version) = parse_version_dir(&name) else {
            result
                .warnings
                .push(format!("{}: ignoring non-numeric entry {name:?}", base_path.display()));
            continue;
        };
        if !entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
            result
                .warnings
                .push(format!("{}: ignoring non-directory {name:?}", base_path.display()));
            continue;
        }
        let path = entry.path();
        match result.versions.get(&version) {
            // "3" and "003" both name version 3; keep the canonical spelling.
            Some(existing) if existing.file_name().map(|f| f.to_string_lossy() == version.to_string()) == Some(true) => {
                result.warnings.push(format!(
                    "{}: {name:?} duplicates version {version}",
                    base_path.display()
                ));
            }
            Some(_) => {
                result.warnings.push(format!(
                    "{}: version {version} found under several names",
                    base_path.display()
                ));
                if name == version.to_string() {
                    result.versions.insert(version, path);
                }
            }
            None => {
                result.versions.insert(version, path);
            }
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selected {
    /// Chosen versions, strictly descending.
    pub versions: Vec<u64>,
    /// Pinned versions that are not available.
    pub missing: Vec<u64>,
}

pub fn select_versions(available: &BTreeSet<u64>, selection: &VersionSelection) -> Selected {
    match selection {
        VersionSelection::Latest(n) => Selected {
            versions: available.iter().rev().take(*n).copied().collect(),
            missing: Vec::new(),
        },
        VersionSelection::All => Selected {
            versions: available.iter().rev().copied().collect(),
            missing: Vec::new(),
        },
        VersionSelection::Specific(wanted) => {
            let wanted: BTreeSet<u64> = wanted.iter().copied().collect();
            Selected {
                versions: wanted.iter().rev().filter(|v| available.contains(v)).copied().collect(),
                missing: wanted.difference(available).copied().collect(),
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct PollResult {
    pub lists: Vec<AspiredVersionList<PathBuf>>,
    /// Entries that could not be scanned, by servable name.
    pub errors: Vec<(String, SourceError)>,
    pub warnings: Vec<String>,
}

/// Scans every entry and builds one aspired list per readable entry, with
/// `base_path/<version>` as each version's payload.
///
/// An entry pinned to specific versions none of which exist emits nothing,
/// so whatever is serving keeps serving.
pub fn poll_once(config: &SourceConfig) -> PollResult {
    let mut result = PollResult::default();
    for entry in &config.entries {
        let scan = match scan_versions(&entry.base_path) {
            Ok(scan) => scan,
            Err(e) => {
                result.errors.push((entry.name.clone(), e));
                continue;
            }
        };
        result.warnings.extend(scan.warnings.iter().cloned());
        let selected = select_versions(&scan.version_set(), &entry.selection);
        for v in &selected.missing {
            result.warnings.push(format!(
                "{}: requested version {v} is not available",
                entry.name
            ));
        }
        if selected.versions.is_empty() && !selected.missing.is_empty() {
            continue;
        }
        let list = AspiredVersionList::from_pairs(
            entry.name.clone(),
            selected
                .versions
                .iter()
                .map(|v| (*v, scan.versions[v].clone())),
        )
        .expect("validated config and distinct versions");
        result.lists.push(list);
    }
    result
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceHealth {
    pub polls: u64,
    pub consecutive_failures: u64,
    pub last_error: Option<String>,
    pub last_aspired: Vec<u64>,
}

/// Polls a set of servable directories and emits aspired path lists.
#[derive(Debug)]
pub struct FileSystemSource {
    config: Mutex<SourceConfig>,
    health: Mutex<BTreeMap<String, SourceHealth>>,
}

impl FileSystemSource {
    pub fn new(config: SourceConfig) -> Self {
        Self {
            config: Mutex::new(config),
            health: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> SourceConfig {
        self.config.lock().unwrap().clone()
    }

    /// Operator override, e.g. `Specific([v])` for a rollback or
    /// `Latest(2)` for a canary.
    pub fn set_selection(&self, name: &str, selection: VersionSelection) -> Result<(), SourceError> {
        let mut config = self.config.lock().unwrap();
        let entry = config
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| SourceError::InvalidConfig(format!("unknown servable {name:?}")))?;
        entry.selection = selection;
        config.validate()
    }

    pub fn health(&self) -> BTreeMap<String, SourceHealth> {
        self.health.lock().unwrap().clone()
    }

    pub fn poll(&self) -> PollResult {
        let config = self.config();
        let result = poll_once(&config);
        let mut health = self.health.lock().unwrap();
        for entry in &config.entries {
            let h = health.entry(entry.name.clone()).or_default();
            h.polls += 1;
            if let Some((_, err)) = result.errors.iter().find(|(n, _)| *n == entry.name) {
                h.consecutive_failures += 1;
                h.last_error = Some(err.to_string());
            } else {
                h.consecutive_failures = 0;
                h.last_error = None;
            }
            if let Some(list) = result.lists.iter().find(|l| l.servable_name() == entry.name) {
                h.last_aspired = list.versions().iter().map(|v| v.version).collect();
            }
        }
        result
    }

    /// Polls once and forwards every list into `sink`.
    pub fn emit_to(&self, sink: &dyn AspiredVersionsSink<PathBuf>) -> PollResult {
        let mut result = self.poll();
        for w in &result.warnings {
            warn!("{w}");
        }
        for (name, e) in &result.errors {
            warn!("source entry {name}: {e}");
        }
        for list in std::mem::take(&mut result.lists) {
            sink.set_aspired_versions(list);
        }
        result
    }

    /// Starts the polling thread. The first poll happens after one interval;
    /// callers wanting an immediate poll call [`Self::emit_to`] first.
    pub fn spawn(self: Arc<Self>, sink: Arc<dyn AspiredVersionsSink<PathBuf>>) -> SourceDriver {
        let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(1);
        let handle = thread::Builder::new()
            .name("fs-source".into())
            .spawn(move || loop {
                let interval = self.config.lock().unwrap().poll_interval();
                match stop_rx.recv_timeout(interval) {
                    Err(RecvTimeoutError::Timeout) => {
                        self.emit_to(sink.as_ref());
                    }
                    _ => break,
                }
            })
            .expect("spawn source thread");
        SourceDriver {
            stop: Some(stop_tx),
            handle: Some(handle),
        }
    }
}

/// Running polling thread; stops when dropped.
#[derive(Debug)]
pub struct SourceDriver {
    stop: Option<Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl SourceDriver {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SourceDriver {
    fn drop(&mut self) {
        self.shutdown();
    }
}
