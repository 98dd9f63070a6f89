//! Deterministic discrete-event loop tying the frontend, the compute
//! elements and the negotiator together.
//!
//! Events at the same instant are handled in a fixed order: job arrivals,
//! hold-window expiries, the frontend cycle, CE grants, the negotiation
//! cycle, job completions and finally pilot walltime expiries. Within one
//! class, events run in the order they were scheduled.

mod catalogue;
mod config;
mod event;
mod metrics;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frontend::{fe_cycle, EntryLedger, PilotLedger};
use crate::model::{FactoryEntry, GpuUseClass, JobAd, NodeSpec, Seconds, SitePolicy};
use crate::negotiator::negotiate;
use crate::sitesim::{
    ce_tick, slot_tick, Claim, Pilot, PilotState, SlotChange, SlotState, SlotStatus,
};

pub use catalogue::{
    catalogue_csv, gpu_catalogue, write_catalogue_csv, CatalogueRow, CATALOGUE_HEADER,
};
pub use config::{
    Arrival, JobGroup, LoadError, ScenarioConfig, SiteConfig, ValidationErrors,
    DEFAULT_FE_PERIOD_SECS, DEFAULT_NEGOTIATOR_PERIOD_SECS,
};
pub use event::{ClaimRecord, Event, EventBody, EventKind, EventLog, IdleByClass, SlotFree};
pub use metrics::{compute_metrics, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    Arrival,
    HoldExpiry,
    Frontend,
    CeGrant,
    Negotiation,
    Completion,
    Walltime,
}

#[derive(Debug, Clone)]
enum Action {
    Arrive(usize),
    HoldExpiry(String),
    Frontend,
    CeGrant(usize),
    Negotiate,
    Complete {
        job_id: String,
        slot_id: String,
        attempt: u32,
    },
    Walltime(String),
}

/// Expands the workload groups into concrete jobs, drawing arrival jitter
/// from a generator seeded with `config.seed`. Jobs are returned in group
/// order.
pub fn generate_jobs(config: &ScenarioConfig) -> Vec<JobAd> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut jobs = Vec::new();
    for group in &config.workload {
        let width = group.count.saturating_sub(1).to_string().len();
        for i in 0..group.count as usize {
            let arrival = match &group.arrival {
                Arrival::Explicit { times } => times[i],
                Arrival::Jitter {
                    base_secs,
                    jitter_secs,
                } => {
                    let j = *jitter_secs as i64;
                    let shift = if j == 0 { 0 } else { rng.gen_range(-j..=j) };
                    (*base_secs as i64 + shift).max(0) as Seconds
                }
            };
            let mut job = group.template.clone();
            job.id = format!("{}-{:0w$}", group.template.id, i, w = width);
            job.submit_time = arrival;
            jobs.push(job);
        }
    }
    jobs
}

/// Runs a scenario to `config.duration_secs` and returns its log and
/// metrics.
pub fn run(config: &ScenarioConfig) -> Result<(EventLog, Metrics), ValidationErrors> {
    config.validate()?;
    let mut sim = Sim::new(config);
    sim.run();
    let metrics = compute_metrics(&sim.log, config);
    Ok((sim.log, metrics))
}

struct Sim<'a> {
    config: &'a ScenarioConfig,
    horizon: Seconds,
    log: EventLog,
    queue: BTreeMap<(Seconds, Class, u64), Action>,
    scheduled: u64,
    entries: BTreeMap<String, FactoryEntry>,
    policies: HashMap<String, SitePolicy>,
    jobs: Vec<JobAd>,
    idle: Vec<JobAd>,
    running: HashMap<String, JobAd>,
    attempts: HashMap<String, u32>,
    pilots: BTreeMap<String, Pilot>,
    pilots_created: u64,
    slots: BTreeMap<String, SlotState>,
    busy_nodes: HashSet<String>,
}

impl<'a> Sim<'a> {
    fn new(config: &'a ScenarioConfig) -> Self {
        let mut sim = Sim {
            config,
            horizon: config.duration_secs,
            log: EventLog::default(),
            queue: BTreeMap::new(),
            scheduled: 0,
            entries: config
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.clone()))
                .collect(),
            policies: config
                .sites
                .iter()
                .map(|s| (s.policy.site_name.clone(), s.policy.clone()))
                .collect(),
            jobs: generate_jobs(config),
            idle: Vec::new(),
            running: HashMap::new(),
            attempts: HashMap::new(),
            pilots: BTreeMap::new(),
            pilots_created: 0,
            slots: BTreeMap::new(),
            busy_nodes: HashSet::new(),
        };
        for i in 0..sim.jobs.len() {
            let t = sim.jobs[i].submit_time;
            sim.schedule(t, Class::Arrival, Action::Arrive(i));
        }
        sim.schedule(0, Class::Frontend, Action::Frontend);
        for i in 0..config.sites.len() {
            sim.schedule(0, Class::CeGrant, Action::CeGrant(i));
        }
        sim.schedule(0, Class::Negotiation, Action::Negotiate);
        sim
    }

    fn schedule(&mut self, at: Seconds, class: Class, action: Action) {
        if at <= self.horizon {
            self.queue.insert((at, class, self.scheduled), action);
            self.scheduled += 1;
        }
    }

    fn run(&mut self) {
        while let Some(((t, _, _), action)) = self.queue.pop_first() {
            match action {
                Action::Arrive(i) => self.arrive(t, i),
                Action::HoldExpiry(slot_id) | Action::Walltime(slot_id) => {
                    self.tick_slot(t, &slot_id)
                }
                Action::Frontend => {
                    self.frontend(t);
                    self.schedule(
                        t + self.config.fe_period_secs,
                        Class::Frontend,
                        Action::Frontend,
                    );
                }
                Action::CeGrant(site) => {
                    self.ce_grant(t, site);
                    let period = self.config.sites[site].policy.ce_grant_period_secs;
                    self.schedule(t + period, Class::CeGrant, Action::CeGrant(site));
                }
                Action::Negotiate => {
                    self.negotiate(t);
                    self.schedule(
                        t + self.config.negotiator_period_secs,
                        Class::Negotiation,
                        Action::Negotiate,
                    );
                }
                Action::Complete {
                    job_id,
                    slot_id,
                    attempt,
                } => self.complete(t, &job_id, &slot_id, attempt),
            }
        }
    }

    fn arrive(&mut self, t: Seconds, i: usize) {
        let job = self.jobs[i].clone();
        self.log.push(
            t,
            EventBody::JobArrival {
                job_id: job.id.clone(),
                gpu_use_class: job.gpu_use(),
                request_cpus: job.request_cpus,
                request_memory_mb: job.request_memory_mb,
                request_gpus: job.request_gpus,
                arch_list: job.arch_list.clone(),
                priority: job.priority,
            },
        );
        self.idle.push(job);
    }

    fn ledger(&self) -> PilotLedger {
        let mut ledger = PilotLedger::new();
        for p in self
            .pilots
            .values()
            .filter(|p| p.state == PilotState::QueuedAtCE)
        {
            ledger
                .entry(p.entry_name.clone())
                .or_default()
                .queued_pilot_ids
                .push(p.id.clone());
        }
        for s in self
            .slots
            .values()
            .filter(|s| s.status == SlotStatus::Active)
        {
            let book: &mut EntryLedger = ledger.entry(s.entry_name.clone()).or_default();
            if s.claims.is_empty() {
                book.running_unclaimed_count += 1;
            } else {
                book.running_claimed_count += 1;
            }
        }
        ledger
    }

    fn frontend(&mut self, t: Seconds) {
        let actions = fe_cycle(
            &self.idle,
            &self.config.entries,
            &self.ledger(),
            &self.policies,
        )
        .expect("validated scenarios name only configured sites");
        let mut idle = IdleByClass::default();
        for j in &self.idle {
            match j.gpu_use() {
                GpuUseClass::MustUseGPU => idle.must_use_gpu += 1,
                GpuUseClass::CanUseGPU => idle.can_use_gpu += 1,
                GpuUseClass::CpuOnly => idle.cpu_only += 1,
            }
        }
        self.log.push(
            t,
            EventBody::FECycle {
                idle,
                submissions: actions.submissions.clone(),
                cancellations: actions.cancellations.clone(),
            },
        );
        for id in &actions.cancellations {
            let pilot = self.pilots.get_mut(id).expect("ledger lists known pilots");
            pilot
                .cancel(t)
                .expect("only CE-queued pilots are cancelled");
            let gpu_entry = self.entries[&pilot.entry_name].is_gpu_entry();
            self.log.push(
                t,
                EventBody::PilotCancelled {
                    pilot_id: id.clone(),
                    entry_name: pilot.entry_name.clone(),
                    gpu_entry,
                },
            );
        }
        for (name, &n) in &actions.submissions {
            let entry = &self.entries[name];
            for _ in 0..n {
                self.pilots_created += 1;
                let pilot = Pilot::queued(format!("p{:06}", self.pilots_created), entry, t);
                self.log.push(
                    t,
                    EventBody::PilotSubmitted {
                        pilot_id: pilot.id.clone(),
                        entry_name: name.clone(),
                        site: entry.cms_site.clone(),
                        gpu_entry: entry.is_gpu_entry(),
                    },
                );
                self.pilots.insert(pilot.id.clone(), pilot);
            }
        }
    }

    fn ce_grant(&mut self, t: Seconds, site: usize) {
        let site = &self.config.sites[site];
        let name = &site.policy.site_name;
        let queue: Vec<Pilot> = self
            .pilots
            .values()
            .filter(|p| {
                p.state == PilotState::QueuedAtCE && &self.entries[&p.entry_name].cms_site == name
            })
            .cloned()
            .collect();
        if queue.is_empty() {
            return;
        }
        let free: Vec<NodeSpec> = site
            .nodes
            .iter()
            .filter(|n| !self.busy_nodes.contains(&n.node_id))
            .cloned()
            .collect();
        for (mut pilot, node) in ce_tick(&queue, &free, &self.entries, t) {
            self.busy_nodes.insert(node.node_id.clone());
            self.log.push(
                t,
                EventBody::PilotGranted {
                    pilot_id: pilot.id.clone(),
                    entry_name: pilot.entry_name.clone(),
                    node_id: node.node_id.clone(),
                },
            );
            let entry = &self.entries[&pilot.entry_name];
            let slot = SlotState::register(&mut pilot, &node, entry, &site.policy, t)
                .expect("a granted pilot can register");
            self.log.push(
                t,
                EventBody::SlotRegistered {
                    slot_id: slot.slot_id.clone(),
                    pilot_id: pilot.id.clone(),
                    entry_name: entry.name.clone(),
                    site: slot.site_name.clone(),
                    node_id: node.node_id.clone(),
                    arch: node.arch,
                    cpus: slot.total_cpus,
                    memory_mb: slot.total_memory_mb,
                    gpus: node.gpus.clone(),
                    hold_window_secs: slot.hold_window_secs,
                    walltime_end: slot.walltime_end,
                },
            );
            if slot.is_gpu_slot() {
                self.schedule(
                    slot.hold_deadline(),
                    Class::HoldExpiry,
                    Action::HoldExpiry(slot.slot_id.clone()),
                );
            }
            self.schedule(
                slot.walltime_end,
                Class::Walltime,
                Action::Walltime(slot.slot_id.clone()),
            );
            self.pilots.insert(pilot.id.clone(), pilot);
            self.slots.insert(slot.slot_id.clone(), slot);
        }
    }

    fn negotiate(&mut self, t: Seconds) {
        let active: Vec<SlotState> = self
            .slots
            .values()
            .filter(|s| s.accepts_claims())
            .cloned()
            .collect();
        let result = negotiate(&self.idle, &active, t);
        self.log.push(
            t,
            EventBody::NegotiationCycle {
                idle_jobs: self.idle.len() as u32,
                slots: active.len() as u32,
                matched: result.pairs.len() as u32,
            },
        );
        for pair in result.pairs {
            let pos = self
                .idle
                .iter()
                .position(|j| j.id == pair.job_id)
                .expect("matched job is idle");
            let job = self.idle.remove(pos);
            let slot = self
                .slots
                .get_mut(&pair.slot_id)
                .expect("matched slot exists");
            let claim = slot.carve(&job, t).expect("negotiated claim fits");
            debug_assert_eq!(claim.gpu_uuids, pair.gpu_uuids);
            let attempt = {
                let a = self.attempts.entry(job.id.clone()).or_insert(0);
                *a += 1;
                *a
            };
            let body = EventBody::JobStarted {
                claim: record(slot, &claim),
                gpu_use_class: job.gpu_use(),
                request_gpus: job.request_gpus,
                slot_arch: slot.arch,
                slot_has_gpus: slot.is_gpu_slot(),
                slot_age_secs: t - slot.start_time,
                end_time: claim.end_time,
            };
            let slot_id = slot.slot_id.clone();
            self.log.push(t, body);
            self.schedule(
                claim.end_time,
                Class::Completion,
                Action::Complete {
                    job_id: job.id.clone(),
                    slot_id,
                    attempt,
                },
            );
            self.running.insert(job.id.clone(), job);
        }
    }

    fn complete(&mut self, t: Seconds, job_id: &str, slot_id: &str, attempt: u32) {
        if self.attempts.get(job_id) != Some(&attempt) {
            return;
        }
        let Some(slot) = self.slots.get_mut(slot_id) else {
            return;
        };
        let Some(claim) = slot.release(job_id) else {
            return;
        };
        self.running.remove(job_id);
        let body = EventBody::JobCompleted(record(slot, &claim));
        let retiring = slot.status == SlotStatus::Retiring;
        self.log.push(t, body);
        if retiring {
            self.tick_slot(t, slot_id);
        }
    }

    fn tick_slot(&mut self, t: Seconds, slot_id: &str) {
        let Some(slot) = self.slots.get_mut(slot_id) else {
            return;
        };
        let policy = &self.policies[&slot.site_name];
        let changes = slot_tick(slot, policy, t);
        for change in changes {
            self.apply_change(t, slot_id, change);
        }
    }

    fn apply_change(&mut self, t: Seconds, slot_id: &str, change: SlotChange) {
        let slot = self.slots.get_mut(slot_id).expect("ticked slot exists");
        let pilot_id = slot.pilot_id.clone();
        match change {
            SlotChange::HoldLifted => self.log.push(
                t,
                EventBody::HoldWindowExpired {
                    slot_id: slot_id.to_string(),
                    open_to_cpu: true,
                },
            ),
            SlotChange::Retiring => {
                self.pilot_to(&pilot_id, PilotState::Retiring, t);
                self.log.push(
                    t,
                    EventBody::HoldWindowExpired {
                        slot_id: slot_id.to_string(),
                        open_to_cpu: false,
                    },
                );
            }
            SlotChange::Retired => {
                let age = t - slot.start_time;
                self.pilot_to(&pilot_id, PilotState::Retired, t);
                self.log.push(
                    t,
                    EventBody::SlotRetired {
                        slot_id: slot_id.to_string(),
                        pilot_id: pilot_id.clone(),
                        slot_age_secs: age,
                    },
                );
                self.drop_slot(slot_id);
            }
            SlotChange::WalltimeExpired(killed) => {
                // slot_tick already returned every killed claim; report the
                // releases one at a time so each event carries consistent
                // free amounts
                let mut free = SlotFree {
                    cpus: slot.free_cpus,
                    memory_mb: slot.free_memory_mb,
                    gpus: slot.free_gpu_count(),
                };
                for c in &killed {
                    free.cpus -= c.cpus;
                    free.memory_mb -= c.memory_mb;
                    free.gpus -= c.gpu_uuids.len() as u32;
                }
                let slot_id_owned = slot.slot_id.clone();
                for c in &killed {
                    free.cpus += c.cpus;
                    free.memory_mb += c.memory_mb;
                    free.gpus += c.gpu_uuids.len() as u32;
                    self.log.push(
                        t,
                        EventBody::JobRequeued(ClaimRecord {
                            job_id: c.job_id.clone(),
                            slot_id: slot_id_owned.clone(),
                            cpus: c.cpus,
                            memory_mb: c.memory_mb,
                            gpu_uuids: c.gpu_uuids.clone(),
                            slot_free: free,
                        }),
                    );
                    if let Some(job) = self.running.remove(&c.job_id) {
                        self.idle.push(job);
                    }
                }
                self.pilot_to(&pilot_id, PilotState::WalltimeExpired, t);
                self.log.push(
                    t,
                    EventBody::PilotWalltimeExpired {
                        pilot_id,
                        slot_id: slot_id.to_string(),
                        requeued_jobs: killed.len() as u32,
                    },
                );
                self.drop_slot(slot_id);
            }
        }
    }

    fn pilot_to(&mut self, pilot_id: &str, state: PilotState, t: Seconds) {
        self.pilots
            .get_mut(pilot_id)
            .expect("slot has a pilot")
            .transition(state, t)
            .expect("slot lifecycle follows the pilot state machine");
    }

    fn drop_slot(&mut self, slot_id: &str) {
        if let Some(slot) = self.slots.remove(slot_id) {
            self.busy_nodes.remove(&slot.node_id);
        }
    }
}

fn record(slot: &SlotState, claim: &Claim) -> ClaimRecord {
    ClaimRecord {
        job_id: claim.job_id.clone(),
        slot_id: slot.slot_id.clone(),
        cpus: claim.cpus,
        memory_mb: claim.memory_mb,
        gpu_uuids: claim.gpu_uuids.clone(),
        slot_free: SlotFree {
            cpus: slot.free_cpus,
            memory_mb: slot.free_memory_mb,
            gpus: slot.free_gpu_count(),
        },
    }
}
