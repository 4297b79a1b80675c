use std::sync::Arc;

use super::SourceError;
use crate::servable::{AspiredVersionList, AspiredVersionsSink};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NameMatch {
    Exact(String),
    Prefix(String),
}

impl NameMatch {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            NameMatch::Exact(n) => n == name,
            NameMatch::Prefix(p) => name.starts_with(p.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteRule {
    pub matcher: NameMatch,
    pub port: usize,
}

/// Ordered rules; the first match wins, `default_port` otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteTable {
    pub rules: Vec<RouteRule>,
    pub default_port: usize,
}

impl RouteTable {
    pub fn new(default_port: usize) -> Self {
        Self {
            rules: Vec::new(),
            default_port,
        }
    }

    pub fn exact(mut self, name: impl Into<String>, port: usize) -> Self {
        self.rules.push(RouteRule {
            matcher: NameMatch::Exact(name.into()),
            port,
        });
        self
    }

    pub fn prefix(mut self, prefix: impl Into<String>, port: usize) -> Self {
        self.rules.push(RouteRule {
            matcher: NameMatch::Prefix(prefix.into()),
            port,
        });
        self
    }

    pub fn route(&self, servable_name: &str) -> usize {
        self.rules
            .iter()
            .find(|r| r.matcher.matches(servable_name))
            .map_or(self.default_port, |r| r.port)
    }

    /// Highest port index the table can produce.
    pub fn max_port(&self) -> usize {
        self.rules
            .iter()
            .map(|r| r.port)
            .chain(std::iter::once(self.default_port))
            .max()
            .unwrap_or(0)
    }
}

/// Splits one aspired-versions stream into several by servable name. Lists
/// are forwarded unmodified.
pub struct SourceRouter<T> {
    table: RouteTable,
    ports: Vec<Arc<dyn AspiredVersionsSink<T>>>,
}

impl<T> SourceRouter<T> {
    pub fn new(
        table: RouteTable,
        ports: Vec<Arc<dyn AspiredVersionsSink<T>>>,
    ) -> Result<Self, SourceError> {
        if table.max_port() >= ports.len() {
            return Err(SourceError::InvalidConfig(format!(
                "route table uses port {} but only {} ports are connected",
                table.max_port(),
                ports.len()
            )));
        }
        Ok(Self { table, ports })
    }

    pub fn table(&self) -> &RouteTable {
        &self.table
    }
}

impl<T: Send> AspiredVersionsSink<T> for SourceRouter<T> {
    fn set_aspired_versions(&self, list: AspiredVersionList<T>) {
        let port = self.table.route(list.servable_name());
        self.ports[port].set_aspired_versions(list);
    }
}
