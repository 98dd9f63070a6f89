use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    parse_factory_entry_xml, FactoryEntry, IngestError, JobAd, NodeSpec, Seconds, SitePolicy,
    Violation,
};

pub const DEFAULT_FE_PERIOD_SECS: Seconds = 300;
pub const DEFAULT_NEGOTIATOR_PERIOD_SECS: Seconds = 60;

/// A site: its policy and the worker nodes behind its CE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SiteConfig {
    pub policy: SitePolicy,
    pub nodes: Vec<NodeSpec>,
}

/// When the jobs of a group arrive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Arrival {
    /// One time per job.
    Explicit { times: Vec<Seconds> },
    /// Every job at `baseSecs` shifted by a uniform draw in
    /// `[-jitterSecs, +jitterSecs]`, clamped at zero.
    #[serde(rename_all = "camelCase")]
    Jitter {
        base_secs: Seconds,
        jitter_secs: Seconds,
    },
}

/// `count` copies of `template`. Copies get ids `<template id>-<index>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobGroup {
    pub template: JobAd,
    pub count: u32,
    pub arrival: Arrival,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioConfig {
    /// Free-form notes about the scenario and its assumptions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub duration_secs: Seconds,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fe_period")]
    pub fe_period_secs: Seconds,
    #[serde(default = "default_negotiator_period")]
    pub negotiator_period_secs: Seconds,
    pub sites: Vec<SiteConfig>,
    pub entries: Vec<FactoryEntry>,
    pub workload: Vec<JobGroup>,
}

fn default_fe_period() -> Seconds {
    DEFAULT_FE_PERIOD_SECS
}

fn default_negotiator_period() -> Seconds {
    DEFAULT_NEGOTIATOR_PERIOD_SECS
}

/// Every violated invariant of a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ValidationErrors(pub Vec<Violation>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation(s)", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  {}", v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Xml {
        path: PathBuf,
        #[source]
        source: IngestError,
    },
}

impl ScenarioConfig {
    /// Reads a scenario file. Entries given as `{"xmlPath": "..."}` are
    /// loaded from factory XML, relative to the scenario's directory.
    pub fn from_path(path: &Path) -> Result<ScenarioConfig, LoadError> {
        let text = read(path)?;
        let mut raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| LoadError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(entries) = raw.get_mut("entries").and_then(|e| e.as_array_mut()) {
            for slot in entries.iter_mut() {
                let Some(rel) = slot.get("xmlPath").and_then(|p| p.as_str()) else {
                    continue;
                };
                let xml_path = base.join(rel);
                let entry = parse_factory_entry_xml(&read(&xml_path)?).map_err(|source| {
                    LoadError::Xml {
                        path: xml_path.clone(),
                        source,
                    }
                })?;
                *slot = serde_json::to_value(entry).expect("entry serializes");
            }
        }
        serde_json::from_value(raw).map_err(|source| LoadError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn site_policy(&self, site: &str) -> Option<&SitePolicy> {
        self.sites
            .iter()
            .map(|s| &s.policy)
            .find(|p| p.site_name == site)
    }

    pub fn total_gpus(&self) -> usize {
        self.sites
            .iter()
            .flat_map(|s| &s.nodes)
            .map(|n| n.gpus.len())
            .sum()
    }

    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let mut out = Vec::new();
        if self.duration_secs == 0 {
            out.push(Violation::new("durationSecs", "must be positive"));
        }
        if self.fe_period_secs == 0 {
            out.push(Violation::new("fePeriodSecs", "must be positive"));
        }
        if self.negotiator_period_secs == 0 {
            out.push(Violation::new("negotiatorPeriodSecs", "must be positive"));
        }

        let mut site_names = HashSet::new();
        let mut node_ids = HashSet::new();
        let mut uuids = HashSet::new();
        for (i, site) in self.sites.iter().enumerate() {
            let path = format!("sites[{}]", i);
            let name = &site.policy.site_name;
            if !site_names.insert(name.as_str()) {
                out.push(Violation::new(
                    format!("{}.policy.siteName", path),
                    format!("duplicate site {}", name),
                ));
            }
            if site.policy.ce_grant_period_secs == 0 {
                out.push(Violation::new(
                    format!("{}.policy.ceGrantPeriodSecs", path),
                    "must be positive",
                ));
            }
            for (j, node) in site.nodes.iter().enumerate() {
                let npath = format!("{}.nodes[{}]", path, j);
                out.extend(node.validate(&npath));
                if &node.site_name != name {
                    out.push(Violation::new(
                        format!("{}.siteName", npath),
                        format!(
                            "node is listed under site {} but names {}",
                            name, node.site_name
                        ),
                    ));
                }
                if !node_ids.insert(node.node_id.as_str()) {
                    out.push(Violation::new(
                        format!("{}.nodeId", npath),
                        format!("duplicate node {}", node.node_id),
                    ));
                }
                for (k, g) in node.gpus.iter().enumerate() {
                    if !uuids.insert(g.uuid.as_str()) {
                        out.push(Violation::new(
                            format!("{}.gpus[{}].uuid", npath, k),
                            format!("duplicate uuid {}", g.uuid),
                        ));
                    }
                }
            }
        }

        let mut entry_names = HashSet::new();
        for (i, entry) in self.entries.iter().enumerate() {
            let path = format!("entries[{}]", i);
            out.extend(entry.validate(&path));
            if !entry_names.insert(entry.name.as_str()) {
                out.push(Violation::new(
                    format!("{}.name", path),
                    format!("duplicate entry {}", entry.name),
                ));
            }
            if !site_names.contains(entry.cms_site.as_str()) {
                out.push(Violation::new(
                    format!("{}.cmsSite", path),
                    format!("site {} is not configured", entry.cms_site),
                ));
            }
        }

        let mut template_ids = BTreeSet::new();
        for (i, group) in self.workload.iter().enumerate() {
            let path = format!("workload[{}]", i);
            out.extend(group.template.validate(&format!("{}.template", path)));
            if !template_ids.insert(group.template.id.as_str()) {
                out.push(Violation::new(
                    format!("{}.template.id", path),
                    format!("duplicate template id {}", group.template.id),
                ));
            }
            if let Arrival::Explicit { times } = &group.arrival {
                if times.len() != group.count as usize {
                    out.push(Violation::new(
                        format!("{}.arrival.times", path),
                        format!("{} times given for {} jobs", times.len(), group.count),
                    ));
                }
            }
        }

        if out.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(out))
        }
    }
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}
