use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::{Arch, GpuDevice, GpuUseClass, MegaBytes, Seconds};

/// Free amounts of a slot right after the event was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SlotFree {
    pub cpus: u32,
    #[serde(rename = "memoryMB")]
    pub memory_mb: MegaBytes,
    pub gpus: u32,
}

/// Idle jobs per GPU use class at a frontend cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IdleByClass {
    #[serde(rename = "mustUseGPU")]
    pub must_use_gpu: u32,
    #[serde(rename = "canUseGPU")]
    pub can_use_gpu: u32,
    pub cpu_only: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClaimRecord {
    pub job_id: String,
    pub slot_id: String,
    pub cpus: u32,
    #[serde(rename = "memoryMB")]
    pub memory_mb: MegaBytes,
    pub gpu_uuids: Vec<String>,
    pub slot_free: SlotFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    #[serde(rename_all = "camelCase")]
    JobArrival {
        job_id: String,
        gpu_use_class: GpuUseClass,
        request_cpus: u32,
        #[serde(rename = "requestMemoryMB")]
        request_memory_mb: MegaBytes,
        #[serde(rename = "requestGPUs")]
        request_gpus: u32,
        arch_list: Vec<Arch>,
        priority: i64,
    },
    #[serde(rename_all = "camelCase")]
    FECycle {
        idle: IdleByClass,
        submissions: BTreeMap<String, u32>,
        cancellations: Vec<String>,
    },
    #[serde(rename_all = "camelCase")]
    PilotSubmitted {
        pilot_id: String,
        entry_name: String,
        site: String,
        gpu_entry: bool,
    },
    #[serde(rename_all = "camelCase")]
    PilotCancelled {
        pilot_id: String,
        entry_name: String,
        gpu_entry: bool,
    },
    #[serde(rename_all = "camelCase")]
    PilotGranted {
        pilot_id: String,
        entry_name: String,
        node_id: String,
    },
    #[serde(rename_all = "camelCase")]
    SlotRegistered {
        slot_id: String,
        pilot_id: String,
        entry_name: String,
        site: String,
        node_id: String,
        arch: Arch,
        cpus: u32,
        #[serde(rename = "memoryMB")]
        memory_mb: MegaBytes,
        gpus: Vec<GpuDevice>,
        hold_window_secs: Seconds,
        walltime_end: Seconds,
    },
    #[serde(rename_all = "camelCase")]
    NegotiationCycle {
        idle_jobs: u32,
        slots: u32,
        matched: u32,
    },
    #[serde(rename_all = "camelCase")]
    JobStarted {
        #[serde(flatten)]
        claim: ClaimRecord,
        gpu_use_class: GpuUseClass,
        #[serde(rename = "requestGPUs")]
        request_gpus: u32,
        slot_arch: Arch,
        slot_has_gpus: bool,
        slot_age_secs: Seconds,
        end_time: Seconds,
    },
    JobCompleted(ClaimRecord),
    /// A claim killed by pilot walltime expiry; the job is idle again.
    JobRequeued(ClaimRecord),
    #[serde(rename_all = "camelCase")]
    HoldWindowExpired {
        slot_id: String,
        /// `true` when the slot now admits CPU-only work, `false` when it is
        /// being handed back to the site.
        open_to_cpu: bool,
    },
    #[serde(rename_all = "camelCase")]
    SlotRetired {
        slot_id: String,
        pilot_id: String,
        slot_age_secs: Seconds,
    },
    #[serde(rename_all = "camelCase")]
    PilotWalltimeExpired {
        pilot_id: String,
        slot_id: String,
        requeued_jobs: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    JobArrival,
    FECycle,
    PilotSubmitted,
    PilotCancelled,
    PilotGranted,
    SlotRegistered,
    NegotiationCycle,
    JobStarted,
    JobCompleted,
    JobRequeued,
    HoldWindowExpired,
    SlotRetired,
    PilotWalltimeExpired,
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::JobArrival { .. } => EventKind::JobArrival,
            EventBody::FECycle { .. } => EventKind::FECycle,
            EventBody::PilotSubmitted { .. } => EventKind::PilotSubmitted,
            EventBody::PilotCancelled { .. } => EventKind::PilotCancelled,
            EventBody::PilotGranted { .. } => EventKind::PilotGranted,
            EventBody::SlotRegistered { .. } => EventKind::SlotRegistered,
            EventBody::NegotiationCycle { .. } => EventKind::NegotiationCycle,
            EventBody::JobStarted { .. } => EventKind::JobStarted,
            EventBody::JobCompleted(_) => EventKind::JobCompleted,
            EventBody::JobRequeued(_) => EventKind::JobRequeued,
            EventBody::HoldWindowExpired { .. } => EventKind::HoldWindowExpired,
            EventBody::SlotRetired { .. } => EventKind::SlotRetired,
            EventBody::PilotWalltimeExpired { .. } => EventKind::PilotWalltimeExpired,
        }
    }

    /// The claim this event opens or closes, if any.
    pub fn claim(&self) -> Option<&ClaimRecord> {
        match self {
            EventBody::JobStarted { claim, .. } => Some(claim),
            EventBody::JobCompleted(c) | EventBody::JobRequeued(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: Seconds,
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }
}

/// Events in `(time, seq)` order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, time: Seconds, body: EventBody) {
        let seq = self.events.len() as u64;
        self.events.push(Event { time, seq, body });
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind() == kind)
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<EventLog, serde_json::Error> {
        let mut events = Vec::new();
        for line in input.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }
        Ok(EventLog { events })
    }
}
