use std::path::PathBuf;
use std::sync::Arc;

use crate::servable::{AspiredVersionList, AspiredVersionsSink};

/// A Source driven by pushed commands instead of polling. Each pushed list
/// enters the chain exactly as a filesystem poll result would.
#[derive(Clone)]
pub struct CommandSource {
    sink: Arc<dyn AspiredVersionsSink<PathBuf>>,
}

impl CommandSource {
    pub fn new(sink: Arc<dyn AspiredVersionsSink<PathBuf>>) -> Self {
        Self { sink }
    }

    pub fn push(&self, list: AspiredVersionList<PathBuf>) {
        self.sink.set_aspired_versions(list);
    }
}

impl std::fmt::Debug for CommandSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CommandSource")
    }
}
