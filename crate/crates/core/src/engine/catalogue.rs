use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use super::event::{EventBody, EventLog};
use crate::model::{GpuDevice, MegaBytes};

pub const CATALOGUE_HEADER: &str =
    "site,device_name,device_count,cuda_capability,global_memory_mb,driver_version,supported_runtimes";

/// One line of the GPU catalogue: a device model at a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogueRow {
    pub site: String,
    pub device_name: String,
    pub device_count: u32,
    pub cuda_capability: f64,
    pub global_memory_mb: MegaBytes,
    pub driver_version: String,
    /// Comma-separated.
    pub supported_runtimes: String,
}

/// Aggregates every GPU ever registered into one row per (site, device
/// name), counting distinct uuids. Properties come from the device with the
/// lowest uuid in the group.
pub fn gpu_catalogue(log: &EventLog) -> Vec<CatalogueRow> {
    let mut groups: BTreeMap<(&str, &str), BTreeMap<&str, &GpuDevice>> = BTreeMap::new();
    for e in log.iter() {
        if let EventBody::SlotRegistered { site, gpus, .. } = &e.body {
            for g in gpus {
                groups
                    .entry((site, &g.device_name))
                    .or_default()
                    .insert(&g.uuid, g);
            }
        }
    }
    groups
        .into_iter()
        .map(|((site, name), devices)| {
            let first = devices.values().next().expect("groups are never empty");
            CatalogueRow {
                site: site.to_string(),
                device_name: name.to_string(),
                device_count: devices.len() as u32,
                cuda_capability: first.cuda_capability,
                global_memory_mb: first.global_memory_mb,
                driver_version: first.driver_version.clone(),
                supported_runtimes: first.supported_runtimes.join(","),
            }
        })
        .collect()
}

/// CSV with a header line, even for an empty catalogue.
pub fn write_catalogue_csv<W: io::Write>(rows: &[CatalogueRow], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CATALOGUE_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn catalogue_csv(rows: &[CatalogueRow]) -> String {
    let mut buf = Vec::new();
    write_catalogue_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}
