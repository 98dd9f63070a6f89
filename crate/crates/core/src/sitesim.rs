//! Simulated compute elements and worker nodes.
//!
//! A pilot waits in a CE queue until a node that fits its entry is free. Once
//! granted it discovers the node's GPUs, advertises a partitionable slot and
//! runs until its walltime limit, or until it gives the node back when its
//! site prefers that for unused GPU slots.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adlang::{parse_expression, ClassAd, Expr, Value};
use crate::model::{
    classify_gpu_use, Arch, FactoryEntry, GpuUseClass, JobAd, MegaBytes, NodeSpec, PostWindow,
    Seconds, SitePolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PilotState {
    QueuedAtCE,
    Starting,
    Registered,
    Retiring,
    Retired,
    Cancelled,
    WalltimeExpired,
}

impl PilotState {
    pub fn can_become(self, next: PilotState) -> bool {
        use PilotState::*;
        matches!(
            (self, next),
            (QueuedAtCE, Starting)
                | (QueuedAtCE, Cancelled)
                | (Starting, Registered)
                | (Registered, Retiring)
                | (Registered, WalltimeExpired)
                | (Retiring, Retired)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            PilotState::Retired | PilotState::Cancelled | PilotState::WalltimeExpired
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("pilot {pilot}: illegal transition {from:?} -> {to:?} at t={at}")]
pub struct TransitionError {
    pub pilot: String,
    pub from: PilotState,
    pub to: PilotState,
    pub at: Seconds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Pilot {
    pub id: String,
    pub entry_name: String,
    pub state: PilotState,
    pub submit_time: Seconds,
    pub start_time: Option<Seconds>,
    pub end_time: Option<Seconds>,
    pub node_id: Option<String>,
    pub walltime_limit_secs: Seconds,
}

impl Pilot {
    pub fn queued(id: impl Into<String>, entry: &FactoryEntry, submit_time: Seconds) -> Self {
        Pilot {
            id: id.into(),
            entry_name: entry.name.clone(),
            state: PilotState::QueuedAtCE,
            submit_time,
            start_time: None,
            end_time: None,
            node_id: None,
            walltime_limit_secs: entry.glidein_max_walltime_secs,
        }
    }

    fn last_time(&self) -> Seconds {
        self.end_time
            .or(self.start_time)
            .unwrap_or(self.submit_time)
    }

    pub fn transition(&mut self, to: PilotState, at: Seconds) -> Result<(), TransitionError> {
        if !self.state.can_become(to) || at < self.last_time() {
            return Err(TransitionError {
                pilot: self.id.clone(),
                from: self.state,
                to,
                at,
            });
        }
        match to {
            PilotState::Starting => self.start_time = Some(at),
            s if s.is_terminal() => self.end_time = Some(at),
            _ => {}
        }
        self.state = to;
        Ok(())
    }

    /// Withdraws a CE-queued pilot.
    pub fn cancel(&mut self, at: Seconds) -> Result<(), TransitionError> {
        self.transition(PilotState::Cancelled, at)
    }
}

/// Can a pilot of `entry` run on `node`? GPU entries need enough GPUs; CPU
/// entries stay off GPU nodes.
pub fn node_fits(entry: &FactoryEntry, node: &NodeSpec) -> bool {
    let gpus = node.gpus.len() as u32;
    let gpu_ok = if entry.is_gpu_entry() {
        gpus >= entry.gpus_per_pilot()
    } else {
        gpus == 0
    };
    node.site_name == entry.cms_site
        && node.arch == entry.arch
        && node.cpus >= entry.glidein_cpus
        && node.memory_mb >= entry.submit_attrs.max_memory
        && gpu_ok
}

/// One CE scheduling pass. Queued pilots are served first-come first-served;
/// each takes the first free node that fits its entry. Returned pilots are in
/// the `Starting` state.
pub fn ce_tick(
    queue: &[Pilot],
    free_nodes: &[NodeSpec],
    entries: &BTreeMap<String, FactoryEntry>,
    clock: Seconds,
) -> Vec<(Pilot, NodeSpec)> {
    let mut order: Vec<&Pilot> = queue
        .iter()
        .filter(|p| p.state == PilotState::QueuedAtCE)
        .collect();
    order.sort_by(|a, b| {
        a.submit_time
            .cmp(&b.submit_time)
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut taken = vec![false; free_nodes.len()];
    let mut grants = Vec::new();
    for pilot in order {
        let Some(entry) = entries.get(&pilot.entry_name) else {
            continue;
        };
        let Some(idx) =
            (0..free_nodes.len()).find(|&i| !taken[i] && node_fits(entry, &free_nodes[i]))
        else {
            continue;
        };
        taken[idx] = true;
        let mut granted = pilot.clone();
        granted.node_id = Some(free_nodes[idx].node_id.clone());
        granted.walltime_limit_secs = entry.glidein_max_walltime_secs;
        if granted.transition(PilotState::Starting, clock).is_ok() {
            grants.push((granted, free_nodes[idx].clone()));
        }
    }
    grants
}

fn version_value(text: &str) -> Value {
    match text.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Value::Real(v),
        _ => Value::Text(text.trim().to_string()),
    }
}

/// Attributes a pilot learns about its node's GPUs at startup.
pub fn gpu_discover(node: &NodeSpec) -> ClassAd {
    let mut ad = ClassAd::default();
    ad.insert_value("GPUs", node.gpus.len() as i64);
    let Some(dev) = node.gpus.first() else {
        return ad;
    };
    ad.insert_value("CUDACapability", dev.cuda_capability);
    ad.insert_value("CUDAClockMhz", dev.clock_mhz);
    ad.insert_value("CUDAComputeUnits", i64::from(dev.compute_units));
    ad.insert_value("CUDACoresPerCU", i64::from(dev.cores_per_cu));
    ad.insert_value("CUDADeviceName", dev.device_name.as_str());
    ad.insert(
        "CUDADriverVersion",
        Expr::Literal(version_value(&dev.driver_version)),
    );
    ad.insert_value("CUDAECCEnabled", dev.ecc_enabled);
    ad.insert_value("CUDAGlobalMemoryMB", dev.global_memory_mb as i64);
    ad.insert_value("CUDAMaxSupportedVersion", dev.max_supported_version);
    ad.insert_value(
        "CMS_CUDA_SUPPORTED_RUNTIMES",
        dev.supported_runtimes.join(","),
    );
    if let Some(v) = &dev.nvidia_driver_version {
        ad.insert_value("CMS_NVIDIA_DRIVER_VERSION", v.as_str());
    }
    let uuids: Vec<&str> = node.gpus.iter().map(|g| g.uuid.as_str()).collect();
    ad.insert_value("AssignedGPUs", uuids.join(","));
    ad
}

const GPU_START: &str = "MY.GpuHoldActive == false || TARGET.RequestGPUs > 0";

/// Machine ad advertised by a starting pilot.
pub fn build_slot_ad(
    pilot: &Pilot,
    node: &NodeSpec,
    entry: &FactoryEntry,
    policy: &SitePolicy,
    clock: Seconds,
) -> ClassAd {
    let discovered = gpu_discover(node);
    let has_gpus = !node.gpus.is_empty();
    let mut ad = ClassAd::machine();
    ad.insert_value("Name", slot_id_for(&pilot.id));
    ad.insert_value("CPUs", i64::from(entry.glidein_cpus));
    ad.insert_value("TotalSlotMemory", entry.submit_attrs.max_memory as i64);
    ad.insert_value("Memory", entry.submit_attrs.max_memory as i64);
    ad.insert_value("Arch", node.arch.as_str());
    ad.insert_value("GLIDEIN_CMSSite", entry.cms_site.as_str());
    ad.insert_value("GLIDEIN_Entry_Name", entry.name.as_str());
    ad.insert_value("SlotStartTime", clock as i64);
    ad.insert_value("HoldWindowSecs", policy.hold_window_secs as i64);
    for (name, expr) in discovered.iter() {
        ad.insert(name, expr.clone());
    }
    ad.insert_value("GpuHoldActive", has_gpus);
    let start = if has_gpus {
        parse_expression(GPU_START).expect("static start expression")
    } else {
        Expr::Literal(Value::Boolean(true))
    };
    ad.insert("Start", start);
    ad
}

pub fn slot_id_for(pilot_id: &str) -> String {
    format!("slot_{}", pilot_id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Claim {
    pub job_id: String,
    pub cpus: u32,
    #[serde(rename = "memoryMB")]
    pub memory_mb: MegaBytes,
    pub gpu_uuids: Vec<String>,
    pub start_time: Seconds,
    pub end_time: Seconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotStatus {
    Active,
    Retiring,
    Retired,
    WalltimeExpired,
}

/// A registered partitionable slot and its dynamic claims.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub slot_id: String,
    pub pilot_id: String,
    pub entry_name: String,
    pub site_name: String,
    pub node_id: String,
    pub arch: Arch,
    pub parent_ad: ClassAd,
    pub total_cpus: u32,
    pub total_memory_mb: MegaBytes,
    pub gpu_uuids: Vec<String>,
    pub free_cpus: u32,
    pub free_memory_mb: MegaBytes,
    pub free_gpu_uuids: BTreeSet<String>,
    pub gpu_hold_active: bool,
    pub claims: Vec<Claim>,
    pub start_time: Seconds,
    pub walltime_end: Seconds,
    pub hold_window_secs: Seconds,
    pub hold_expired: bool,
    pub ever_gpu_claimed: bool,
    pub status: SlotStatus,
}

impl SlotState {
    /// Registers a `Starting` pilot: builds its ad and moves it to
    /// `Registered`.
    pub fn register(
        pilot: &mut Pilot,
        node: &NodeSpec,
        entry: &FactoryEntry,
        policy: &SitePolicy,
        clock: Seconds,
    ) -> Result<SlotState, TransitionError> {
        let ad = build_slot_ad(pilot, node, entry, policy, clock);
        pilot.transition(PilotState::Registered, clock)?;
        let gpu_uuids: Vec<String> = node.gpus.iter().map(|g| g.uuid.clone()).collect();
        let start = pilot.start_time.unwrap_or(clock);
        Ok(SlotState {
            slot_id: slot_id_for(&pilot.id),
            pilot_id: pilot.id.clone(),
            entry_name: entry.name.clone(),
            site_name: entry.cms_site.clone(),
            node_id: node.node_id.clone(),
            arch: node.arch,
            parent_ad: ad,
            total_cpus: entry.glidein_cpus,
            total_memory_mb: entry.submit_attrs.max_memory,
            free_cpus: entry.glidein_cpus,
            free_memory_mb: entry.submit_attrs.max_memory,
            free_gpu_uuids: gpu_uuids.iter().cloned().collect(),
            gpu_hold_active: !gpu_uuids.is_empty(),
            gpu_uuids,
            claims: Vec::new(),
            start_time: clock,
            walltime_end: start + pilot.walltime_limit_secs,
            hold_window_secs: policy.hold_window_secs,
            hold_expired: false,
            ever_gpu_claimed: false,
            status: SlotStatus::Active,
        })
    }

    pub fn is_gpu_slot(&self) -> bool {
        !self.gpu_uuids.is_empty()
    }

    pub fn free_gpu_count(&self) -> u32 {
        self.free_gpu_uuids.len() as u32
    }

    pub fn accepts_claims(&self) -> bool {
        self.status == SlotStatus::Active
    }

    pub fn hold_deadline(&self) -> Seconds {
        self.start_time + self.hold_window_secs
    }

    fn set_hold(&mut self, active: bool) {
        self.gpu_hold_active = active;
        self.parent_ad.insert_value("GpuHoldActive", active);
    }

    /// GPUs `job` would receive here, or `None` if it does not fit.
    pub fn plan_claim(&self, job: &JobAd, clock: Seconds) -> Option<Vec<String>> {
        if !self.accepts_claims()
            || job.request_cpus > self.free_cpus
            || job.request_memory_mb > self.free_memory_mb
            || self.walltime_end.saturating_sub(clock) < job.max_wall_time_secs
        {
            return None;
        }
        let free = self.free_gpu_count();
        let n = match classify_gpu_use(job) {
            GpuUseClass::MustUseGPU if job.request_gpus > free => return None,
            GpuUseClass::MustUseGPU => job.request_gpus,
            GpuUseClass::CanUseGPU => job.request_gpus.min(free),
            GpuUseClass::CpuOnly => 0,
        };
        Some(
            self.free_gpu_uuids
                .iter()
                .take(n as usize)
                .cloned()
                .collect(),
        )
    }

    /// Reserves resources for `job`. GPUs are handed out lowest uuid first.
    pub fn carve(&mut self, job: &JobAd, clock: Seconds) -> Option<Claim> {
        let gpus = self.plan_claim(job, clock)?;
        for g in &gpus {
            self.free_gpu_uuids.remove(g);
        }
        self.free_cpus -= job.request_cpus;
        self.free_memory_mb -= job.request_memory_mb;
        self.ever_gpu_claimed |= !gpus.is_empty();
        let claim = Claim {
            job_id: job.id.clone(),
            cpus: job.request_cpus,
            memory_mb: job.request_memory_mb,
            gpu_uuids: gpus,
            start_time: clock,
            end_time: clock + job.run_time_secs,
        };
        self.claims.push(claim.clone());
        Some(claim)
    }

    /// Returns a claim's resources to the slot.
    pub fn release(&mut self, job_id: &str) -> Option<Claim> {
        let idx = self.claims.iter().position(|c| c.job_id == job_id)?;
        let claim = self.claims.remove(idx);
        self.free_cpus += claim.cpus;
        self.free_memory_mb += claim.memory_mb;
        self.free_gpu_uuids.extend(claim.gpu_uuids.iter().cloned());
        Some(claim)
    }

    /// Free plus claimed equals the advertised totals.
    pub fn is_balanced(&self) -> bool {
        let cpus: u32 = self.claims.iter().map(|c| c.cpus).sum();
        let mem: MegaBytes = self.claims.iter().map(|c| c.memory_mb).sum();
        let gpus: usize = self.claims.iter().map(|c| c.gpu_uuids.len()).sum();
        self.free_cpus + cpus == self.total_cpus
            && self.free_memory_mb + mem == self.total_memory_mb
            && self.free_gpu_uuids.len() + gpus == self.gpu_uuids.len()
    }
}

/// Lifecycle changes produced by [`slot_tick`].
#[derive(Debug, Clone, PartialEq)]
pub enum SlotChange {
    /// The hold window ended; the slot now admits CPU-only work.
    HoldLifted,
    /// The hold window ended on a never-used GPU slot of a site that wants it
    /// back.
    Retiring,
    Retired,
    /// Walltime reached; the listed claims were killed.
    WalltimeExpired(Vec<Claim>),
}

/// Advances time-driven slot state to `clock`.
pub fn slot_tick(slot: &mut SlotState, policy: &SitePolicy, clock: Seconds) -> Vec<SlotChange> {
    let mut changes = Vec::new();
    if matches!(
        slot.status,
        SlotStatus::Retired | SlotStatus::WalltimeExpired
    ) {
        return changes;
    }
    if clock >= slot.walltime_end {
        let killed = std::mem::take(&mut slot.claims);
        for c in &killed {
            slot.free_cpus += c.cpus;
            slot.free_memory_mb += c.memory_mb;
            slot.free_gpu_uuids.extend(c.gpu_uuids.iter().cloned());
        }
        slot.status = SlotStatus::WalltimeExpired;
        changes.push(SlotChange::WalltimeExpired(killed));
        return changes;
    }
    if slot.is_gpu_slot() && !slot.hold_expired && clock >= slot.hold_deadline() {
        slot.hold_expired = true;
        match policy.post_window {
            PostWindow::ReturnToSite if !slot.ever_gpu_claimed => {
                slot.status = SlotStatus::Retiring;
                changes.push(SlotChange::Retiring);
            }
            // a slot whose GPUs were used keeps running and fills its CPUs
            _ => {
                slot.set_hold(false);
                changes.push(SlotChange::HoldLifted);
            }
        }
    }
    if slot.status == SlotStatus::Retiring && slot.claims.is_empty() {
        slot.status = SlotStatus::Retired;
        changes.push(SlotChange::Retired);
    }
    changes
}
