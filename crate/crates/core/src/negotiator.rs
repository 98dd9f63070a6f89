//! Second matchmaking stage: idle jobs onto registered partitionable slots,
//! using the full dynamically discovered slot attributes.

use serde::{Deserialize, Serialize};

use crate::adlang::{symmetric_match, ClassAd, CmpOp, Expr, Scope, Value};
use crate::model::{classify_gpu_use, GpuUseClass, JobAd, Seconds};
use crate::sitesim::SlotState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchPair {
    pub job_id: String,
    pub slot_id: String,
    pub gpu_uuids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_job_ids: Vec<String>,
}

fn machine(name: &str) -> Expr {
    Expr::attr(Scope::Machine, name)
}

fn gpu_clauses(job: &JobAd) -> Vec<Expr> {
    let mut out = Vec::new();
    if let Some(cap) = job.cuda_capability {
        out.push(Expr::compare(
            CmpOp::Ge,
            machine("CUDACapability"),
            Expr::literal(cap),
        ));
    }
    if job.cuda_runtime.is_some() {
        out.push(Expr::member(
            Expr::attr(Scope::Job, "CUDARuntime"),
            machine("CMS_CUDA_SUPPORTED_RUNTIMES"),
        ));
    }
    if let Some(mem) = job.gpu_memory_mb {
        out.push(Expr::compare(
            CmpOp::Ge,
            machine("CUDAGlobalMemoryMB"),
            Expr::literal(mem as i64),
        ));
    }
    out
}

/// The job's `Requirements`: architecture membership, then the GPU property
/// clauses, then any extra requirements.
///
/// For jobs that may (but need not) use GPUs the GPU clauses only apply to
/// slots that have GPUs, so CPU slots stay eligible.
pub fn job_requirements(job: &JobAd) -> Expr {
    let archs: Vec<&str> = job.arch_list.iter().map(|a| a.as_str()).collect();
    let mut parts = vec![Expr::member(
        machine("Arch"),
        Expr::literal(archs.join(",")),
    )];
    if job.request_gpus > 0 {
        let gpu = gpu_clauses(job);
        match classify_gpu_use(job) {
            GpuUseClass::MustUseGPU => parts.extend(gpu),
            _ if gpu.is_empty() => {}
            _ => parts.push(Expr::Paren(Box::new(Expr::or(
                Expr::compare(CmpOp::Eq, machine("GPUs"), Expr::literal(0i64)),
                Expr::Paren(Box::new(Expr::conjunction(gpu))),
            )))),
        }
    }
    if let Some(extra) = &job.extra_requirements {
        parts.push(extra.clone().grouped());
    }
    Expr::conjunction(parts)
}

/// Job-side ad used by the negotiator.
pub fn build_job_ad(job: &JobAd) -> ClassAd {
    let mut ad = ClassAd::job();
    ad.insert_value("JobId", job.id.as_str());
    ad.insert_value("RequestCpus", i64::from(job.request_cpus));
    ad.insert_value("RequestMemory", job.request_memory_mb as i64);
    ad.insert_value("RequestGPUs", i64::from(job.request_gpus));
    ad.insert_value("RequiresGPU", i64::from(u8::from(job.requires_gpu)));
    if let Some(cap) = job.cuda_capability {
        ad.insert_value("CUDACapability", cap);
    }
    if let Some(rt) = &job.cuda_runtime {
        ad.insert_value("CUDARuntime", rt.as_str());
    }
    if let Some(mem) = job.gpu_memory_mb {
        ad.insert_value("GPUMemoryMB", mem as i64);
    }
    let archs: Vec<&str> = job.arch_list.iter().map(|a| a.as_str()).collect();
    ad.insert_value("ArchList", Value::Text(archs.join(",")));
    ad.insert_value("MaxWallTimeSecs", job.max_wall_time_secs as i64);
    ad.insert_value("JobPrio", job.priority);
    ad.insert("Requirements", job_requirements(job));
    ad
}

/// Sort key among candidate slots for `job`; smaller is better.
///
/// GPU-requesting jobs best-fit on free GPUs, then free CPUs. CPU-only jobs
/// prefer slots with no free GPU so GPUs stay available, then best-fit on
/// CPUs. Slot id breaks ties.
pub fn rank_key<'a>(job: &JobAd, slot: &'a SlotState) -> (i64, u32, &'a str) {
    let free_gpus = i64::from(slot.free_gpu_count());
    let primary = if job.request_gpus > 0 {
        free_gpus - i64::from(job.request_gpus)
    } else {
        i64::from(free_gpus > 0)
    };
    (primary, slot.free_cpus, slot.slot_id.as_str())
}

/// Negotiation order: priority descending, then submit time, then id.
pub fn negotiation_order(jobs: &[JobAd]) -> Vec<&JobAd> {
    let mut order: Vec<&JobAd> = jobs.iter().collect();
    order.sort_by(|a, b| {
        b.priority
            .cmp(&a.priority)
            .then(a.submit_time.cmp(&b.submit_time))
            .then_with(|| a.id.cmp(&b.id))
    });
    order
}

// Search nodes one repair attempt may expand before giving up on the job.
const REPAIR_BUDGET: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Room {
    cpus: u32,
    mem: u64,
    gpus: u32,
}

impl Room {
    fn of(slot: &SlotState) -> Room {
        Room {
            cpus: slot.free_cpus,
            mem: slot.free_memory_mb,
            gpus: slot.free_gpu_count(),
        }
    }

    /// Room left after placing `job`, mirroring [`SlotState::plan_claim`].
    fn take(self, job: &JobAd) -> Option<Room> {
        if job.request_cpus > self.cpus || job.request_memory_mb > self.mem {
            return None;
        }
        let g = match classify_gpu_use(job) {
            GpuUseClass::MustUseGPU if job.request_gpus > self.gpus => return None,
            GpuUseClass::MustUseGPU => job.request_gpus,
            GpuUseClass::CanUseGPU => job.request_gpus.min(self.gpus),
            GpuUseClass::CpuOnly => 0,
        };
        Some(Room {
            cpus: self.cpus - job.request_cpus,
            mem: self.mem - job.request_memory_mb,
            gpus: self.gpus - g,
        })
    }
}

/// Backtracking search for a placement of `jobs` (in order) onto `rooms`.
/// `hint[k]` is tried first for job `k`. Slots that are interchangeable at a
/// given point (same room, same compatibility column) are tried only once.
struct Repair<'a> {
    jobs: &'a [&'a JobAd],
    compat: &'a [Vec<bool>],
    column: &'a [usize],
    hint: &'a [Option<usize>],
    budget: usize,
}

impl Repair<'_> {
    fn place(&mut self, k: usize, rooms: &mut [Room], out: &mut Vec<usize>) -> bool {
        if k == self.jobs.len() {
            return true;
        }
        if self.budget == 0 {
            return false;
        }
        self.budget -= 1;
        let job = self.jobs[k];
        let mut tried: Vec<(usize, Room)> = Vec::new();
        let hint = self.hint[k];
        let order = hint
            .into_iter()
            .chain((0..rooms.len()).filter(|s| Some(*s) != hint));
        for s in order {
            if !self.compat[k][s] || tried.contains(&(self.column[s], rooms[s])) {
                continue;
            }
            tried.push((self.column[s], rooms[s]));
            let Some(after) = rooms[s].take(job) else {
                continue;
            };
            let before = rooms[s];
            rooms[s] = after;
            out.push(s);
            if self.place(k + 1, rooms, out) {
                return true;
            }
            out.pop();
            rooms[s] = before;
        }
        false
    }
}

/// One negotiation cycle.
///
/// Jobs are taken in negotiation order and each is placed on its best-ranked
/// candidate; the claim is applied to a working copy right away so later jobs
/// see the reduced free amounts. When a job finds no room, the placements
/// made earlier in this cycle may be rearranged to make room for it, as long
/// as every earlier job stays matched. `slots` itself is not modified.
pub fn negotiate(idle_jobs: &[JobAd], slots: &[SlotState], clock: Seconds) -> MatchResult {
    let order = negotiation_order(idle_jobs);
    let compat: Vec<Vec<bool>> = order
        .iter()
        .map(|job| {
            let ad = build_job_ad(job);
            slots
                .iter()
                .map(|s| {
                    s.accepts_claims()
                        && s.walltime_end.saturating_sub(clock) >= job.max_wall_time_secs
                        && symmetric_match(&ad, &s.parent_ad)
                })
                .collect()
        })
        .collect();
    // slots with identical compatibility columns are interchangeable
    let mut column = Vec::with_capacity(slots.len());
    let mut seen: Vec<Vec<bool>> = Vec::new();
    for s in 0..slots.len() {
        let col: Vec<bool> = compat.iter().map(|row| row[s]).collect();
        let id = seen.iter().position(|c| *c == col).unwrap_or_else(|| {
            seen.push(col);
            seen.len() - 1
        });
        column.push(id);
    }

    let mut working: Vec<SlotState> = slots.to_vec();
    // (index into order, slot index) for every job matched so far
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let mut unmatched = Vec::new();
    for (k, job) in order.iter().enumerate() {
        let best = (0..working.len())
            .filter(|&s| compat[k][s] && working[s].plan_claim(job, clock).is_some())
            .min_by(|&a, &b| rank_key(job, &working[a]).cmp(&rank_key(job, &working[b])));
        if let Some(s) = best {
            working[s].carve(job, clock);
            placed.push((k, s));
            continue;
        }
        // rearranging only helps if an earlier placement of this cycle sits
        // on a slot this job could use
        let movable = placed.iter().any(|&(_, s)| compat[k][s]);
        let demand = |f: fn(&JobAd) -> u64| -> u64 {
            placed.iter().map(|&(j, _)| f(order[j])).sum::<u64>() + f(job)
        };
        let supply = |f: fn(&Room) -> u64| -> u64 { slots.iter().map(|s| f(&Room::of(s))).sum() };
        let fits_in_total = demand(|j| u64::from(j.request_cpus)) <= supply(|r| u64::from(r.cpus))
            && demand(|j| j.request_memory_mb) <= supply(|r| r.mem)
            && demand(|j| match classify_gpu_use(j) {
                GpuUseClass::MustUseGPU => u64::from(j.request_gpus),
                _ => 0,
            }) <= supply(|r| u64::from(r.gpus));
        if !movable || !fits_in_total {
            unmatched.push(k);
            continue;
        }
        let mut members: Vec<usize> = placed.iter().map(|&(j, _)| j).collect();
        members.push(k);
        let jobs: Vec<&JobAd> = members.iter().map(|&j| order[j]).collect();
        let sub_compat: Vec<Vec<bool>> = members.iter().map(|&j| compat[j].clone()).collect();
        let mut hint: Vec<Option<usize>> = placed.iter().map(|&(_, s)| Some(s)).collect();
        hint.push(None);
        let mut rooms: Vec<Room> = slots.iter().map(Room::of).collect();
        let mut search = Repair {
            jobs: &jobs,
            compat: &sub_compat,
            column: &column,
            hint: &hint,
            budget: REPAIR_BUDGET,
        };
        let mut assignment = Vec::new();
        if !search.place(0, &mut rooms, &mut assignment) {
            unmatched.push(k);
            continue;
        }
        working = slots.to_vec();
        placed = members.into_iter().zip(assignment).collect();
        for &(j, s) in &placed {
            working[s].carve(order[j], clock);
        }
    }

    // report pairs with the claims as finally carved
    let mut result = MatchResult::default();
    for &(j, s) in &placed {
        let claim = working[s]
            .claims
            .iter()
            .find(|c| c.job_id == order[j].id)
            .expect("placed job has a claim");
        result.pairs.push(MatchPair {
            job_id: order[j].id.clone(),
            slot_id: working[s].slot_id.clone(),
            gpu_uuids: claim.gpu_uuids.clone(),
        });
    }
    result.unmatched_job_ids = unmatched.into_iter().map(|k| order[k].id.clone()).collect();
    result
}
