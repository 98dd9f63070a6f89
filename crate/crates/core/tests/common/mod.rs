#![allow(dead_code)]
//! Test-only helpers: fixtures and the exhaustive matchmaking oracle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glidepool::adlang::symmetric_match;
use glidepool::engine::{EventBody, EventLog, ScenarioConfig};
use glidepool::model::{
    Arch, FactoryEntry, GpuDevice, JobAd, NodeSpec, ResourceSlots, SitePolicy, SubmitAttrs,
};
use glidepool::negotiator::build_job_ad;
use glidepool::sitesim::{slot_tick, Pilot, PilotState, SlotState};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn scenario(name: &str) -> ScenarioConfig {
    ScenarioConfig::from_path(&scenario_path(name)).unwrap_or_else(|e| panic!("{}: {}", name, e))
}

pub fn a100(uuid: &str) -> GpuDevice {
    GpuDevice {
        uuid: uuid.into(),
        device_name: "NVIDIA A100-PCIE-40GB".into(),
        cuda_capability: 8.0,
        global_memory_mb: 40536,
        driver_version: "11.3".into(),
        max_supported_version: 11030,
        supported_runtimes: ["10.1", "10.2", "11.0", "11.1"].map(String::from).to_vec(),
        clock_mhz: 1410.0,
        compute_units: 108,
        cores_per_cu: 64,
        ecc_enabled: true,
        nvidia_driver_version: Some("515.48.07".into()),
    }
}

pub fn node(id: &str, site: &str, arch: Arch, gpus: Vec<GpuDevice>) -> NodeSpec {
    NodeSpec {
        node_id: id.into(),
        site_name: site.into(),
        cpus: 8,
        memory_mb: 32000,
        arch,
        gpus,
    }
}

#[derive(Clone)]
struct Room {
    cpus: u32,
    mem: u64,
    gpus: u32,
}

/// Exhaustive priority-order matcher. Every assignment of jobs to slots (or
/// to nothing) is enumerated; among feasible ones the matched set that is
/// lexicographically largest in negotiation order wins: the first job is
/// matched whenever any feasible assignment matches it, then the second, and
/// so on.
///
/// Feasibility is recomputed here from the slot totals and the job requests,
/// independently of the negotiator's own fit check. Only the two-sided
/// expression match is shared (it belongs to the ad language, not to the
/// negotiator).
pub fn brute_force_matched(jobs: &[JobAd], slots: &[SlotState], clock: u64) -> BTreeSet<String> {
    let mut order: Vec<&JobAd> = jobs.iter().collect();
    order.sort_by(|a, b| {
        b.priority
            .cmp(&a.priority)
            .then(a.submit_time.cmp(&b.submit_time))
            .then(a.id.cmp(&b.id))
    });
    let compatible: Vec<Vec<bool>> = order
        .iter()
        .map(|j| {
            let ad = build_job_ad(j);
            slots
                .iter()
                .map(|s| {
                    s.accepts_claims()
                        && symmetric_match(&ad, &s.parent_ad)
                        && s.walltime_end.saturating_sub(clock) >= j.max_wall_time_secs
                })
                .collect()
        })
        .collect();
    let rooms: Vec<Room> = slots
        .iter()
        .map(|s| Room {
            cpus: s.free_cpus,
            mem: s.free_memory_mb,
            gpus: s.free_gpu_uuids.len() as u32,
        })
        .collect();
    let mut best: Vec<bool> = vec![false; order.len()];
    let mut current = Vec::with_capacity(order.len());
    search(
        &order,
        &compatible,
        &mut rooms.clone(),
        0,
        &mut current,
        &mut best,
    );
    order
        .iter()
        .zip(best)
        .filter(|(_, m)| *m)
        .map(|(j, _)| j.id.clone())
        .collect()
}

fn gpus_taken(job: &JobAd, free: u32) -> Option<u32> {
    match (job.requires_gpu, job.request_gpus) {
        (true, n) if n > free => None,
        (true, n) => Some(n),
        (false, n) => Some(n.min(free)),
    }
}

fn search(
    order: &[&JobAd],
    compatible: &[Vec<bool>],
    rooms: &mut Vec<Room>,
    i: usize,
    current: &mut Vec<bool>,
    best: &mut Vec<bool>,
) {
    if i == order.len() {
        if *current > *best {
            best.clone_from(current);
        }
        return;
    }
    let job = order[i];
    for s in 0..rooms.len() {
        if !compatible[i][s] {
            continue;
        }
        let r = rooms[s].clone();
        if job.request_cpus > r.cpus || job.request_memory_mb > r.mem {
            continue;
        }
        let Some(g) = gpus_taken(job, r.gpus) else {
            continue;
        };
        rooms[s] = Room {
            cpus: r.cpus - job.request_cpus,
            mem: r.mem - job.request_memory_mb,
            gpus: r.gpus - g,
        };
        current.push(true);
        search(order, compatible, rooms, i + 1, current, best);
        current.pop();
        rooms[s] = r;
    }
    current.push(false);
    search(order, compatible, rooms, i + 1, current, best);
    current.pop();
}

pub fn entry(
    name: &str,
    site: &str,
    arch: Arch,
    cpus: u32,
    memory_mb: u64,
    gpus: u32,
) -> FactoryEntry {
    FactoryEntry {
        name: name.into(),
        gatekeeper: format!("{}.example.org {}.example.org:9619", name, name),
        gridtype: "condor".into(),
        auth_method: None,
        cms_site: site.into(),
        submit_attrs: SubmitAttrs {
            max_memory: memory_mb,
            xcount: cpus,
            request_gpus: gpus,
        },
        glidein_cpus: cpus,
        glidein_max_mem_mbs: memory_mb,
        glidein_max_walltime_secs: 172800,
        resource_slots: (gpus > 0).then(|| ResourceSlots {
            resource_name: "GPUs".into(),
            count: gpus,
            slot_type: "main".into(),
        }),
        arch,
    }
}

/// A registered slot at t=0 with `gpus` A100s. With `hold_lifted` the
/// slot already admits CPU-only work.
pub fn slot(
    n: usize,
    arch: Arch,
    gpus: u32,
    cpus: u32,
    memory_mb: u64,
    hold_lifted: bool,
) -> SlotState {
    let site = "T2_TEST";
    let devices = (0..gpus)
        .map(|g| a100(&format!("GPU-{}-{}", n, g)))
        .collect();
    let mut node = node(&format!("node{}", n), site, arch, devices);
    node.cpus = cpus.max(8);
    node.memory_mb = memory_mb.max(32000);
    let entry = entry(&format!("entry{}", n), site, arch, cpus, memory_mb, gpus);
    let mut policy = SitePolicy::new(site, 10);
    if hold_lifted {
        policy.hold_window_secs = 0;
    }
    let mut pilot = Pilot::queued(format!("p{}", n), &entry, 0);
    pilot.transition(PilotState::Starting, 0).unwrap();
    let mut s = SlotState::register(&mut pilot, &node, &entry, &policy, 0).unwrap();
    slot_tick(&mut s, &policy, 0);
    s
}

/// Small random negotiation instance: 1 to `max_jobs` jobs, 1 to
/// `max_slots` slots, mixed architectures, GPU classes and shapes.
pub fn random_instance(
    seed: u64,
    max_jobs: usize,
    max_slots: usize,
) -> (Vec<JobAd>, Vec<SlotState>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_slots = rng.gen_range(1..=max_slots);
    let slots = (0..n_slots)
        .map(|i| {
            let arch = *Arch::ALL.choose(&mut rng).unwrap();
            let gpus = [0, 0, 1, 2][rng.gen_range(0..4)];
            let cpus = rng.gen_range(1..=8);
            slot(
                i,
                arch,
                gpus,
                cpus,
                u64::from(cpus) * 2000,
                rng.gen_bool(0.5),
            )
        })
        .collect();
    let n_jobs = rng.gen_range(1..=max_jobs);
    let jobs = (0..n_jobs)
        .map(|i| {
            let mut j = JobAd::cpu(
                format!("j{}", i),
                rng.gen_range(1..=4),
                500 * rng.gen_range(2..=12),
                3600,
            );
            match rng.gen_range(0..3) {
                0 => {
                    j.requires_gpu = true;
                    j.request_gpus = rng.gen_range(1..=2);
                }
                1 => j.request_gpus = rng.gen_range(1..=2),
                _ => {}
            }
            if j.request_gpus > 0 && rng.gen_bool(0.2) {
                j.cuda_capability = Some(if rng.gen_bool(0.5) { 7.0 } else { 8.5 });
            }
            let mut arch: Vec<Arch> = Arch::ALL
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(0.5))
                .collect();
            if arch.is_empty() {
                arch.push(*Arch::ALL.choose(&mut rng).unwrap());
            }
            j.arch_list = arch;
            j.priority = rng.gen_range(0..=2);
            j.submit_time = rng.gen_range(0..=3);
            j
        })
        .collect();
    (jobs, slots)
}

struct Ledger {
    cpus: u32,
    memory_mb: u64,
    gpus: BTreeSet<String>,
    claims: HashMap<String, (u32, u64, Vec<String>)>,
}

/// Replays claims against registered totals. At every claim event the free
/// amounts reported in the log must equal the totals minus what is claimed,
/// and no GPU may be held twice.
pub fn replay_conservation(log: &EventLog) -> Result<usize, String> {
    let mut slots: HashMap<String, Ledger> = HashMap::new();
    let mut checked = 0;
    for e in log.iter() {
        match &e.body {
            EventBody::SlotRegistered {
                slot_id,
                cpus,
                memory_mb,
                gpus,
                ..
            } => {
                slots.insert(
                    slot_id.clone(),
                    Ledger {
                        cpus: *cpus,
                        memory_mb: *memory_mb,
                        gpus: gpus.iter().map(|g| g.uuid.clone()).collect(),
                        claims: HashMap::new(),
                    },
                );
            }
            body => {
                let Some(c) = body.claim() else { continue };
                let s = slots
                    .get_mut(&c.slot_id)
                    .ok_or_else(|| format!("seq {}: unknown slot {}", e.seq, c.slot_id))?;
                if matches!(body, EventBody::JobStarted { .. }) {
                    for g in &c.gpu_uuids {
                        if !s.gpus.contains(g) {
                            return Err(format!("seq {}: {} is not on {}", e.seq, g, c.slot_id));
                        }
                        if s.claims.values().any(|(_, _, held)| held.contains(g)) {
                            return Err(format!("seq {}: {} claimed twice", e.seq, g));
                        }
                    }
                    s.claims
                        .insert(c.job_id.clone(), (c.cpus, c.memory_mb, c.gpu_uuids.clone()));
                } else if s.claims.remove(&c.job_id).is_none() {
                    return Err(format!(
                        "seq {}: {} released without a claim",
                        e.seq, c.job_id
                    ));
                }
                let cpus: u32 = s.claims.values().map(|c| c.0).sum();
                let mem: u64 = s.claims.values().map(|c| c.1).sum();
                let gpus: usize = s.claims.values().map(|c| c.2.len()).sum();
                if cpus > s.cpus || mem > s.memory_mb || gpus > s.gpus.len() {
                    return Err(format!("seq {}: {} over-committed", e.seq, c.slot_id));
                }
                let f = c.slot_free;
                if f.cpus + cpus != s.cpus
                    || f.memory_mb + mem != s.memory_mb
                    || f.gpus as usize + gpus != s.gpus.len()
                {
                    return Err(format!(
                        "seq {}: {} free {:?} does not balance",
                        e.seq, c.slot_id, f
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// Pilot states implied by each event, checked against the allowed moves.
pub fn pilot_paths_legal(log: &EventLog) -> Result<(), String> {
    use PilotState::*;
    let mut states: BTreeMap<String, PilotState> = BTreeMap::new();
    let mut slot_owner: HashMap<String, String> = HashMap::new();
    let mut step = |pilot: &str, to: PilotState, seq: u64| -> Result<(), String> {
        let from = states.get(pilot).copied();
        let ok = match from {
            None => to == QueuedAtCE,
            Some(f) => f.can_become(to),
        };
        if !ok {
            return Err(format!(
                "seq {}: pilot {} {:?} -> {:?}",
                seq, pilot, from, to
            ));
        }
        states.insert(pilot.to_string(), to);
        Ok(())
    };
    for e in log.iter() {
        match &e.body {
            EventBody::PilotSubmitted { pilot_id, .. } => step(pilot_id, QueuedAtCE, e.seq)?,
            EventBody::PilotCancelled { pilot_id, .. } => step(pilot_id, Cancelled, e.seq)?,
            EventBody::PilotGranted { pilot_id, .. } => step(pilot_id, Starting, e.seq)?,
            EventBody::SlotRegistered {
                pilot_id, slot_id, ..
            } => {
                slot_owner.insert(slot_id.clone(), pilot_id.clone());
                step(pilot_id, Registered, e.seq)?
            }
            EventBody::HoldWindowExpired {
                slot_id,
                open_to_cpu: false,
            } => step(&slot_owner[slot_id], Retiring, e.seq)?,
            EventBody::SlotRetired { pilot_id, .. } => step(pilot_id, Retired, e.seq)?,
            EventBody::PilotWalltimeExpired { pilot_id, .. } => {
                step(pilot_id, WalltimeExpired, e.seq)?
            }
            _ => {}
        }
    }
    Ok(())
}
