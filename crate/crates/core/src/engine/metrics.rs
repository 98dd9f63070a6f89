use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::event::{EventBody, EventLog};
use crate::model::Seconds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metrics {
    pub jobs_completed: u64,
    pub mean_job_wait_secs: f64,
    pub peak_concurrent_gpus_in_use: u64,
    pub unique_gpus_used: u64,
    /// GPU-seconds registered in the pool but not claimed.
    pub gpu_idle_secs: u64,
    /// Lifetime of pilots that ended without running a single payload.
    pub pilot_wasted_walltime_secs: u64,
    /// Claimed CPU-seconds over registered CPU-seconds.
    pub cpu_utilization: f64,
}

struct SlotSpan {
    start: Seconds,
    end: Option<Seconds>,
    cpus: u64,
    gpus: u64,
    jobs_started: u64,
}

struct ClaimSpan {
    start: Seconds,
    cpus: u64,
    gpus: u64,
}

/// Derives the run's metrics from its log alone. Slots and claims still open
/// at the end are cut at `config.duration_secs`.
pub fn compute_metrics(log: &EventLog, config: &ScenarioConfig) -> Metrics {
    let horizon = config.duration_secs;
    let mut arrivals: HashMap<&str, Seconds> = HashMap::new();
    let mut slots: HashMap<&str, SlotSpan> = HashMap::new();
    let mut open: HashMap<&str, ClaimSpan> = HashMap::new();
    // (start, end, cpus, gpus) of every claim
    let mut closed: Vec<(Seconds, Seconds, u64, u64)> = Vec::new();
    let mut used = BTreeSet::new();
    let mut completed = 0u64;
    let mut wait_total = 0u64;

    for e in log.iter() {
        match &e.body {
            EventBody::JobArrival { job_id, .. } => {
                arrivals.insert(job_id, e.time);
            }
            EventBody::SlotRegistered {
                slot_id,
                cpus,
                gpus,
                ..
            } => {
                slots.insert(
                    slot_id,
                    SlotSpan {
                        start: e.time,
                        end: None,
                        cpus: u64::from(*cpus),
                        gpus: gpus.len() as u64,
                        jobs_started: 0,
                    },
                );
            }
            EventBody::SlotRetired { slot_id, .. }
            | EventBody::PilotWalltimeExpired { slot_id, .. } => {
                if let Some(s) = slots.get_mut(slot_id.as_str()) {
                    s.end = Some(e.time);
                }
            }
            EventBody::JobStarted { claim, .. } => {
                used.extend(claim.gpu_uuids.iter().map(String::as_str));
                if let Some(s) = slots.get_mut(claim.slot_id.as_str()) {
                    s.jobs_started += 1;
                }
                open.insert(
                    &claim.job_id,
                    ClaimSpan {
                        start: e.time,
                        cpus: u64::from(claim.cpus),
                        gpus: claim.gpu_uuids.len() as u64,
                    },
                );
            }
            EventBody::JobCompleted(claim) | EventBody::JobRequeued(claim) => {
                if let Some(c) = open.remove(claim.job_id.as_str()) {
                    closed.push((c.start, e.time, c.cpus, c.gpus));
                    if matches!(e.body, EventBody::JobCompleted(_)) {
                        completed += 1;
                        let arrived = arrivals
                            .get(claim.job_id.as_str())
                            .copied()
                            .unwrap_or(c.start);
                        wait_total += c.start.saturating_sub(arrived);
                    }
                }
            }
            _ => {}
        }
    }
    closed.extend(
        open.values()
            .map(|c| (c.start, horizon.max(c.start), c.cpus, c.gpus)),
    );

    let mut registered_gpu_secs = 0u64;
    let mut registered_cpu_secs = 0u64;
    let mut wasted = 0u64;
    for s in slots.values() {
        let end = s.end.unwrap_or(horizon).max(s.start);
        registered_gpu_secs += s.gpus * (end - s.start);
        registered_cpu_secs += s.cpus * (end - s.start);
        if s.end.is_some() && s.jobs_started == 0 {
            wasted += end - s.start;
        }
    }
    let claimed_gpu_secs: u64 = closed.iter().map(|&(a, b, _, g)| g * (b - a)).sum();
    let claimed_cpu_secs: u64 = closed.iter().map(|&(a, b, c, _)| c * (b - a)).sum();

    Metrics {
        jobs_completed: completed,
        mean_job_wait_secs: if completed == 0 {
            0.0
        } else {
            wait_total as f64 / completed as f64
        },
        peak_concurrent_gpus_in_use: peak_in_use(&closed),
        unique_gpus_used: used.len() as u64,
        gpu_idle_secs: registered_gpu_secs.saturating_sub(claimed_gpu_secs),
        pilot_wasted_walltime_secs: wasted,
        cpu_utilization: if registered_cpu_secs == 0 {
            0.0
        } else {
            claimed_cpu_secs as f64 / registered_cpu_secs as f64
        },
    }
}

/// Largest number of GPUs held at once; intervals are half-open.
fn peak_in_use(claims: &[(Seconds, Seconds, u64, u64)]) -> u64 {
    let mut deltas: Vec<(Seconds, i64)> = Vec::with_capacity(claims.len() * 2);
    for &(start, end, _, gpus) in claims {
        if gpus > 0 && end > start {
            deltas.push((start, gpus as i64));
            deltas.push((end, -(gpus as i64)));
        }
    }
    // releases sort before acquisitions at the same instant
    deltas.sort_unstable();
    let mut now = 0i64;
    let mut peak = 0i64;
    for (_, d) in deltas {
        now += d;
        peak = peak.max(now);
    }
    peak as u64
}
