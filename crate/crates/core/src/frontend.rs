//! First matchmaking stage: turn idle workload into pilot requests per factory
//! entry and withdraw CE-queued pilots once their workload has drained.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    classify_gpu_use, static_entry_compat, FactoryEntry, GpuUseClass, JobAd, SitePolicy,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrontendError {
    #[error("entry {entry} refers to site {site}, which has no policy")]
    UnknownSite { entry: String, site: String },
}

/// Pilot bookkeeping for one entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EntryLedger {
    pub queued_pilot_ids: Vec<String>,
    pub running_unclaimed_count: u32,
    pub running_claimed_count: u32,
}

/// Pilot bookkeeping per entry name.
pub type PilotLedger = BTreeMap<String, EntryLedger>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FEActions {
    /// entry name to number of new pilots; only positive counts are present
    pub submissions: BTreeMap<String, u32>,
    /// CE-queued pilots to withdraw
    pub cancellations: Vec<String>,
}

impl FEActions {
    pub fn is_empty(&self) -> bool {
        self.submissions.is_empty() && self.cancellations.is_empty()
    }
}

/// Lower median; `None` for an empty list.
fn median(mut values: Vec<u32>) -> Option<u32> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    Some(values[(values.len() - 1) / 2])
}

/// How many matching jobs one pilot of `entry` is expected to absorb.
pub fn slots_per_pilot(entry: &FactoryEntry, matching: &[&JobAd]) -> u32 {
    let (capacity, request) = if entry.is_gpu_entry() {
        (
            entry.gpus_per_pilot(),
            median(matching.iter().map(|j| j.request_gpus).collect()),
        )
    } else {
        (
            entry.glidein_cpus,
            median(matching.iter().map(|j| j.request_cpus).collect()),
        )
    };
    match request {
        Some(r) if r > 0 => (capacity / r).max(1),
        _ => 1,
    }
}

/// Idle jobs that would motivate pilots on `entry`. GPU entries only count
/// jobs that must use GPUs.
pub fn motivating_jobs<'a>(idle_jobs: &'a [JobAd], entry: &FactoryEntry) -> Vec<&'a JobAd> {
    idle_jobs
        .iter()
        .filter(|j| static_entry_compat(j, entry))
        .filter(|j| !entry.is_gpu_entry() || classify_gpu_use(j) == GpuUseClass::MustUseGPU)
        .collect()
}

/// Pilot pressure estimator: pilots still needed for `matching`, after
/// discounting pilots already queued or running without a claim.
pub fn pilots_needed(
    entry: &FactoryEntry,
    matching: &[&JobAd],
    ledger: &EntryLedger,
    policy: &SitePolicy,
) -> u32 {
    let per_pilot = slots_per_pilot(entry, matching) as usize;
    let need = matching.len().div_ceil(per_pilot) as i64;
    let queued = ledger.queued_pilot_ids.len() as i64;
    let wanted = need - queued - i64::from(ledger.running_unclaimed_count);
    let room = i64::from(policy.max_queued_pilots) - queued;
    wanted.min(room).max(0) as u32
}

/// One frontend cycle over all entries.
pub fn fe_cycle(
    idle_jobs: &[JobAd],
    entries: &[FactoryEntry],
    ledger: &PilotLedger,
    policies: &HashMap<String, SitePolicy>,
) -> Result<FEActions, FrontendError> {
    let empty = EntryLedger::default();
    let mut actions = FEActions::default();
    for entry in entries {
        let policy = policies
            .get(&entry.cms_site)
            .ok_or_else(|| FrontendError::UnknownSite {
                entry: entry.name.clone(),
                site: entry.cms_site.clone(),
            })?;
        let book = ledger.get(&entry.name).unwrap_or(&empty);
        let matching = motivating_jobs(idle_jobs, entry);
        if matching.is_empty() {
            actions
                .cancellations
                .extend(book.queued_pilot_ids.iter().cloned());
            continue;
        }
        let n = pilots_needed(entry, &matching, book, policy);
        if n > 0 {
            actions.submissions.insert(entry.name.clone(), n);
        }
    }
    Ok(actions)
}
