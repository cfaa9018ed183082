//! Scenario engine: wires workload actors, the merge queues, the traffic
//! regulator, the NIC model, and the completion pollers into one
//! deterministic event loop.
//!
//! Application I/O threads are simulated actors. An actor that reaches its
//! request's issue time enqueues into the per-direction merge queue and
//! races for the consumer token; the token holder paces against the
//! regulator, drains the queue in batches, merges adjacent runs, chains
//! same-node work requests, and posts. Pollers drain completion queues
//! under the configured strategy and run handlers to completion; handlers
//! retire requests, free admission window bytes, release pool slots, and
//! wake blocked actors.
//!
//! CPU-side actor costs scale with host oversubscription: dedicated
//! spinning pollers pin virtual CPUs, and when spinners plus actors exceed
//! the budget, every actor step stretches proportionally. That is the
//! mechanism behind busy polling's scalability collapse.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::admission::TrafficRegulator;
use crate::batching::{group_by_node, BatchBuilder, BatchMode, BatchPolicy, MergeQueue};
use crate::metrics::MetricsRegistry;
use crate::nic::{MrCostModel, NicConfig, NicModel};
use crate::polling::{PollerMode, PollerState, PollingStrategy};
use crate::sim::{CpuScale, EventKind, EventQueue, SimTime};
use crate::verbs::{
    AddressSpace, CompletionQueue, CqId, CqOwner, DataRequest, Direction, MemoryRegion,
    MessagePool, MrId, MrKind, NodeId, Opcode, QpId, QueuePair, ReqId, ScatterGatherEntry,
    Session, WcStatus, WorkCompletion, WorkRequest, WrId,
};
use crate::workload::TraceRecord;

/// CPU-side cost constants for actor and poller steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpuCosts {
    pub enqueue_cost_ns: u64,
    pub merge_check_cost_ns: u64,
    pub batch_overhead_ns: u64,
    pub poll_cq_cost_ns: u64,
    pub handle_wc_cost_ns: u64,
    /// Poller-capable virtual CPUs per host.
    pub cpu_budget: u64,
}

impl Default for CpuCosts {
    fn default() -> Self {
        CpuCosts {
            enqueue_cost_ns: 50,
            merge_check_cost_ns: 100,
            batch_overhead_ns: 200,
            poll_cq_cost_ns: 80,
            handle_wc_cost_ns: 400,
            cpu_budget: 8,
        }
    }
}

impl CpuCosts {
    pub fn validate(&self) -> Result<(), String> {
        if self.cpu_budget == 0 {
            return Err("cpu.cpu_budget must be positive".into());
        }
        if self.poll_cq_cost_ns == 0 {
            return Err("cpu.poll_cq_cost_ns must be positive".into());
        }
        Ok(())
    }
}

/// Fully resolved scenario parameters handed to the engine.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub nic: NicConfig,
    pub mr_cost: MrCostModel,
    pub cpu: CpuCosts,
    pub policy: BatchPolicy,
    pub mode: BatchMode,
    pub strategy: PollingStrategy,
    pub space: AddressSpace,
    pub window_bytes: u64,
    pub fragment_bytes: u64,
    pub peers: usize,
    pub qps_per_node: usize,
    pub send_queue_depth: usize,
    pub pool_slots: usize,
    pub slot_len: u64,
    pub pipeline_depth: usize,
    pub merge_queue_capacity: usize,
    pub sample_every_ns: u64,
    pub max_sim_ns: u64,
    pub closed_loop: bool,
    pub cluster_size: usize,
    pub inter_burst_gap_ns: u64,
    pub actors: usize,
}

#[derive(Debug, Clone)]
struct WrPlan {
    requests: Vec<DataRequest>,
    kind: MrKind,
    bytes: u64,
}

#[derive(Debug, Clone)]
struct BatchCtx {
    direction: Direction,
    plans: Vec<WrPlan>,
    built: Vec<WrId>,
    idx: usize,
}

#[derive(Debug, Clone)]
struct PostGroup {
    node: NodeId,
    qp: Option<QpId>,
    wrs: Vec<WrId>,
}

#[derive(Debug, Clone)]
struct PostCtx {
    direction: Direction,
    groups: Vec<PostGroup>,
    idx: usize,
}

#[derive(Debug, Clone)]
enum ActorCont {
    /// Issue trace record `records[next]`.
    IssueNext,
    /// Enqueue done; race for the consumer token.
    AfterEnqueue { direction: Direction },
    /// Token held: scan the queue. `pacer_admitted` means the head's
    /// window bytes were already reserved by the waker.
    Scan { direction: Direction, pacer_admitted: bool },
    /// Token held: build WRs for the planned batch.
    Build { ctx: BatchCtx },
    /// Token held: post built WRs, chaining per the mode.
    Post { ctx: PostCtx },
}

#[derive(Debug)]
struct Actor {
    records: Vec<usize>,
    packs: Vec<u64>,
    next: usize,
    outstanding: u64,
    cont: Option<ActorCont>,
    /// Parked: continuation stored, no event scheduled.
    parked: bool,
    waiting_pipeline: bool,
    waiting_pack: bool,
    done: bool,
}

/// One doorbell in the post log, for the replay oracle.
#[derive(Debug, Clone, Copy)]
pub struct PostLogEntry {
    pub qp: usize,
    pub chain_len: u32,
    pub qp_miss: bool,
    pub mpt_misses: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct ProcessLogEntry {
    pub wr: usize,
    pub wqe_miss: bool,
}

#[derive(Debug)]
pub struct EngineResult {
    pub metrics: MetricsRegistry,
    pub violations: Vec<String>,
    pub truncated: bool,
    pub final_clock: SimTime,
    pub nic_charged_ns: u64,
    pub post_log: Vec<PostLogEntry>,
    pub process_log: Vec<ProcessLogEntry>,
    /// WRs in post order per doorbell, parallel to `post_log`.
    pub post_order: Vec<Vec<usize>>,
    /// (qp, wr) in delivery order.
    pub delivery_log: Vec<(usize, usize)>,
    /// Per poller: handled-WC count per interrupt entry.
    pub poller_entries: Vec<Vec<u64>>,
    pub poller_interrupts: Vec<u64>,
    pub poller_cpu_ns: Vec<u64>,
}

pub struct Engine {
    cfg: EngineConfig,
    q: EventQueue,
    pub metrics: MetricsRegistry,
    nic: NicModel,
    scale: CpuScale,

    trace: Vec<TraceRecord>,
    req_issue_at: Vec<SimTime>,
    req_covered: Vec<u8>,

    actors: Vec<Actor>,
    write_q: MergeQueue,
    read_q: MergeQueue,
    regulator: TrafficRegulator,

    session: Session,
    qps: Vec<QueuePair>,
    cqs: Vec<CompletionQueue>,
    mrs: Vec<MemoryRegion>,
    wrs: Vec<WorkRequest>,
    wcs: Vec<WorkCompletion>,
    pollers: Vec<PollerState>,

    post_log: Vec<PostLogEntry>,
    post_order: Vec<Vec<usize>>,
    process_log: Vec<ProcessLogEntry>,
    delivery_log: Vec<(usize, usize)>,
    violations: Vec<String>,
}

impl Engine {
    pub fn new(cfg: EngineConfig, trace: Vec<TraceRecord>) -> Engine {
        assert!(cfg.actors >= 1 && cfg.peers >= 1 && cfg.qps_per_node >= 1);
        let spinners = cfg.strategy.spinner_count(cfg.peers * cfg.qps_per_node);
        let scale = CpuScale::new(spinners as u64 + cfg.actors as u64, cfg.cpu.cpu_budget);

        // CQ topology: one per QP, or m shared queues.
        let qp_count = cfg.peers * cfg.qps_per_node;
        let cq_count = match cfg.strategy {
            PollingStrategy::SharedCq { m } => m.min(qp_count).max(1),
            _ => qp_count,
        };
        let shared = matches!(cfg.strategy, PollingStrategy::SharedCq { .. });

        let mut qps = Vec::with_capacity(qp_count);
        let mut peers_map: Vec<Vec<QpId>> = vec![Vec::new(); cfg.peers];
        for node in 0..cfg.peers {
            for _ in 0..cfg.qps_per_node {
                let qp_id = QpId(qps.len());
                let cq = CqId(if shared { qp_id.0 % cq_count } else { qp_id.0 });
                qps.push(QueuePair {
                    qp_id,
                    node: NodeId(node as u16),
                    send_queue_depth: cfg.send_queue_depth,
                    cq,
                    unreaped: 0,
                    waiters: VecDeque::new(),
                    last_completion_at: SimTime::ZERO,
                });
                peers_map[node].push(qp_id);
            }
        }
        let mut cqs = Vec::with_capacity(cq_count);
        for i in 0..cq_count {
            let wired_qps = qps.iter().filter(|q| q.cq.0 == i).count();
            cqs.push(CompletionQueue {
                cq_id: CqId(i),
                entries: VecDeque::new(),
                capacity: cfg.send_queue_depth * wired_qps.max(1),
                notify_armed: false,
                owner: if shared { CqOwner::Shared } else { CqOwner::PerQp },
                poller: i,
            });
        }

        let mut nic = NicModel::new(cfg.nic.clone());
        let mut mrs = Vec::new();
        let mut slots = Vec::with_capacity(cfg.pool_slots);
        for _ in 0..cfg.pool_slots {
            let mr_id = MrId(mrs.len());
            mrs.push(MemoryRegion {
                mr_id,
                base: 0,
                len: cfg.slot_len,
                kind: MrKind::PreRegistered,
                space: cfg.space,
                registered_at: SimTime::ZERO,
            });
            nic.mpt_register(mr_id.0 as u64);
            slots.push(mr_id);
        }
        let mempool = MessagePool::new(slots, cfg.slot_len);
        let mut session = Session::new(peers_map, mempool, cfg.space);
        session.handler_registered = true; // pollers wired below

        // Partition the trace per actor and derive pack ids for
        // closed-loop pacing.
        let mut actors: Vec<Actor> = (0..cfg.actors)
            .map(|_| Actor {
                records: Vec::new(),
                packs: Vec::new(),
                next: 0,
                outstanding: 0,
                cont: None,
                parked: false,
                waiting_pipeline: false,
                waiting_pack: false,
                done: false,
            })
            .collect();
        for (idx, rec) in trace.iter().enumerate() {
            let a = rec.origin_actor;
            assert!(a < cfg.actors, "trace actor {a} out of range");
            let k = actors[a].records.len();
            actors[a].records.push(idx);
            actors[a].packs.push((k / cfg.cluster_size.max(1)) as u64);
        }

        let pollers = (0..cq_count).map(PollerState::new).collect();

        let req_issue_at = vec![SimTime::ZERO; trace.len()];
        let req_covered = vec![0u8; trace.len()];

        Engine {
            q: EventQueue::new(),
            metrics: MetricsRegistry::new(),
            nic,
            scale,
            req_issue_at,
            req_covered,
            actors,
            write_q: MergeQueue::new(Direction::Write, cfg.merge_queue_capacity),
            read_q: MergeQueue::new(Direction::Read, cfg.merge_queue_capacity),
            regulator: TrafficRegulator::new(cfg.window_bytes, cfg.fragment_bytes),
            session,
            qps,
            cqs,
            mrs,
            wrs: Vec::new(),
            wcs: Vec::new(),
            pollers,
            post_log: Vec::new(),
            post_order: Vec::new(),
            process_log: Vec::new(),
            delivery_log: Vec::new(),
            violations: Vec::new(),
            trace,
            cfg,
        }
    }

    pub fn set_admission_hook(&mut self, hook: crate::admission::AdmissionHook) {
        self.regulator.set_hook(hook);
    }

    fn queue_mut(&mut self, d: Direction) -> &mut MergeQueue {
        match d {
            Direction::Write => &mut self.write_q,
            Direction::Read => &mut self.read_q,
        }
    }

    fn violation(&mut self, msg: String) {
        self.violations.push(msg);
    }

    // ---- actor scheduling helpers ----

    fn schedule_actor(&mut self, a: usize, at: SimTime, cont: ActorCont, arrival: bool) {
        let actor = &mut self.actors[a];
        debug_assert!(actor.cont.is_none(), "actor {a} already has a continuation");
        actor.cont = Some(cont);
        actor.parked = false;
        let kind =
            if arrival { EventKind::PostArrival { actor: a } } else { EventKind::ActorWakeup { actor: a } };
        self.q.schedule(at, kind);
    }

    fn park_actor(&mut self, a: usize, cont: ActorCont) {
        let actor = &mut self.actors[a];
        debug_assert!(actor.cont.is_none(), "actor {a} already has a continuation");
        actor.cont = Some(cont);
        actor.parked = true;
    }

    fn wake_actor(&mut self, a: usize, at: SimTime) {
        let actor = &mut self.actors[a];
        if actor.parked {
            actor.parked = false;
            self.q.schedule(at, EventKind::ActorWakeup { actor: a });
        }
    }

    /// Decide when (or whether) the actor's next record issues.
    fn schedule_next_issue(&mut self, a: usize) {
        let now = self.q.now();
        let actor = &mut self.actors[a];
        if actor.next >= actor.records.len() {
            actor.done = true;
            return;
        }
        let rec = self.trace[actor.records[actor.next]];
        let pack_boundary = actor.next > 0
            && actor.packs[actor.next] != actor.packs[actor.next - 1];
        if self.cfg.closed_loop && pack_boundary && actor.outstanding > 0 {
            actor.waiting_pack = true;
            self.park_actor(a, ActorCont::IssueNext);
            return;
        }
        if self.cfg.pipeline_depth > 0 && actor.outstanding >= self.cfg.pipeline_depth as u64 {
            actor.waiting_pipeline = true;
            self.park_actor(a, ActorCont::IssueNext);
            return;
        }
        let at = rec.arrive_at.max(now);
        self.schedule_actor(a, at, ActorCont::IssueNext, true);
    }

    // ---- actor continuations ----

    fn actor_step(&mut self, a: usize) {
        let cont = match self.actors[a].cont.take() {
            Some(c) => c,
            None => return, // spurious
        };
        match cont {
            ActorCont::IssueNext => self.issue_next(a),
            ActorCont::AfterEnqueue { direction } => self.after_enqueue(a, direction),
            ActorCont::Scan { direction, pacer_admitted } => {
                self.scan(a, direction, pacer_admitted)
            }
            ActorCont::Build { ctx } => self.build_step(a, ctx),
            ActorCont::Post { ctx } => self.post_step(a, ctx),
        }
    }

    fn issue_next(&mut self, a: usize) {
        let now = self.q.now();
        let rec_idx = self.actors[a].records[self.actors[a].next];
        let rec = self.trace[rec_idx];
        if self.queue_mut(rec.direction).is_full() {
            self.queue_mut(rec.direction).full_waiters.push_back(a);
            self.park_actor(a, ActorCont::IssueNext);
            return;
        }
        let request = DataRequest {
            req_id: ReqId(rec_idx as u64),
            direction: rec.direction,
            node: NodeId(rec.node),
            remote_addr: rec.remote_addr,
            len: rec.len,
            arrive_at: now,
            origin_actor: a,
        };
        self.queue_mut(rec.direction).enqueue(request);
        self.req_issue_at[rec_idx] = now;
        self.metrics.request_in(now);
        self.metrics.merge_queue_depth = (self.write_q.len() + self.read_q.len()) as u64;
        self.actors[a].outstanding += 1;
        self.actors[a].next += 1;
        let cost = self.scale.apply(self.cfg.cpu.enqueue_cost_ns);
        self.schedule_actor(a, now.add(cost), ActorCont::AfterEnqueue { direction: rec.direction }, false);
    }

    fn after_enqueue(&mut self, a: usize, direction: Direction) {
        let got_token = self.queue_mut(direction).try_acquire_token();
        if got_token {
            self.scan(a, direction, false);
        } else {
            // Someone else is batching; this request rides along.
            self.schedule_next_issue(a);
        }
    }

    /// Bytes reserved up front for one batch: a full chain's worth. Under
    /// an enabled window the quantum is clamped to a quarter of it
    /// (fragment-aligned) so several reservations pipeline instead of
    /// batches proceeding in lockstep with completions.
    fn batch_quantum(&self) -> u64 {
        let frag = self.cfg.fragment_bytes;
        let quantum = self.cfg.policy.max_chaining_size as u64 * frag;
        if self.regulator.enabled() {
            let window = self.regulator.window_bytes();
            let quarter = (window / 4 / frag) * frag;
            quantum.min(quarter.max(frag)).min(window)
        } else {
            quantum
        }
    }

    /// The merge-and-chain scan. Runs atomically at the current instant;
    /// its CPU cost delays the build step. The caller holds the token.
    ///
    /// Pacing blocks once at the top: the holder reserves a whole batch
    /// quantum against the window, then drains the batch. Requests stack
    /// behind a blocked holder, which is the extra merge opportunity.
    fn scan(&mut self, a: usize, direction: Direction, mut pacer_admitted: bool) {
        let now = self.q.now();
        let max_chain = self.cfg.policy.max_chaining_size;
        loop {
            if self.queue_mut(direction).peek().is_none() {
                if self.queue_mut(direction).release_and_recheck() {
                    continue; // late enqueue slipped in; carry it
                }
                self.schedule_next_issue(a);
                return;
            }
            let quantum = self.batch_quantum();
            let admitted = if pacer_admitted {
                pacer_admitted = false;
                true // reserved by the waker
            } else {
                self.regulator.try_admit(quantum)
            };
            if !admitted {
                self.regulator.enqueue_waiter(a, quantum);
                self.park_actor(a, ActorCont::Scan { direction, pacer_admitted: true });
                return;
            }
            let mut builder = BatchBuilder::new(self.cfg.mode, &self.cfg.policy);
            let mut dequeued = 0usize;
            let mut used = 0u64;
            while dequeued < max_chain {
                let head_len = match self.queue_mut(direction).peek() {
                    Some(r) => r.len,
                    None => break,
                };
                let need = self.regulator.round_up(head_len);
                if used + need > quantum {
                    break; // reservation spent
                }
                let r = self.queue_mut(direction).dequeue().unwrap();
                used += need;
                self.metrics.merge_queue_depth =
                    (self.write_q.len() + self.read_q.len()) as u64;
                // Space freed: admit one queue-full waiter.
                if let Some(w) = self.queue_mut(direction).full_waiters.pop_front() {
                    self.wake_actor(w, now);
                }
                builder.push(r);
                dequeued += 1;
            }
            // Return the unused part of the reservation.
            let unused = quantum - used;
            if unused > 0 {
                let woken = self.regulator.release_unused(unused);
                for actor in woken {
                    self.wake_actor(actor, now);
                }
            }
            self.metrics.in_flight_bytes = self.regulator.in_flight_bytes();
            debug_assert!(!builder.is_empty(), "non-empty queue yielded empty batch");
            let plans = self.plan_wrs(builder.finish());
            let ctx = BatchCtx { direction, plans, built: Vec::new(), idx: 0 };
            let cost = self.scale.apply(
                dequeued as u64 * self.cfg.cpu.merge_check_cost_ns
                    + self.cfg.cpu.batch_overhead_ns,
            );
            self.schedule_actor(a, now.add(cost), ActorCont::Build { ctx }, false);
            return;
        }
    }

    /// Turn merged segments into WR plans, deciding preMR vs dynMR per
    /// segment and splitting preMR segments that exceed the pool slot.
    fn plan_wrs(&self, segments: Vec<Vec<DataRequest>>) -> Vec<WrPlan> {
        let slot_len = self.cfg.slot_len;
        let mut plans = Vec::new();
        for seg in segments {
            let bytes: u64 = seg.iter().map(|r| r.len).sum();
            let kind = self.cfg.policy.mr_strategy.pick(self.cfg.space, bytes);
            if kind == MrKind::PreRegistered && bytes > slot_len {
                // Split into slot-sized chunks; a single oversized request
                // falls back to dynamic registration.
                let mut chunk: Vec<DataRequest> = Vec::new();
                let mut chunk_bytes = 0u64;
                for r in seg {
                    if r.len > slot_len {
                        if !chunk.is_empty() {
                            plans.push(WrPlan {
                                bytes: chunk_bytes,
                                requests: std::mem::take(&mut chunk),
                                kind: MrKind::PreRegistered,
                            });
                            chunk_bytes = 0;
                        }
                        plans.push(WrPlan { bytes: r.len, requests: vec![r], kind: MrKind::Dynamic });
                        continue;
                    }
                    if chunk_bytes + r.len > slot_len {
                        plans.push(WrPlan {
                            bytes: chunk_bytes,
                            requests: std::mem::take(&mut chunk),
                            kind: MrKind::PreRegistered,
                        });
                        chunk_bytes = 0;
                    }
                    chunk_bytes += r.len;
                    chunk.push(r);
                }
                if !chunk.is_empty() {
                    plans.push(WrPlan {
                        bytes: chunk_bytes,
                        requests: chunk,
                        kind: MrKind::PreRegistered,
                    });
                }
            } else {
                plans.push(WrPlan { requests: seg, kind, bytes });
            }
        }
        plans
    }

    /// Register a memory region, charging the cost model to the caller via
    /// the returned cost.
    fn register_mr(&mut self, space: AddressSpace, len: u64, kind: MrKind) -> (MrId, u64) {
        let mr_id = MrId(self.mrs.len());
        self.mrs.push(MemoryRegion {
            mr_id,
            base: 0,
            len,
            kind,
            space,
            registered_at: self.q.now(),
        });
        self.nic.mpt_register(mr_id.0 as u64);
        let cost = self.cfg.mr_cost.mr_cost(space, kind, len);
        (mr_id, cost)
    }

    /// Build one WR per step; MR preparation cost (copy or registration)
    /// delays the next step. PreMR exhaustion parks the actor here.
    fn build_step(&mut self, a: usize, mut ctx: BatchCtx) {
        let now = self.q.now();
        if ctx.idx >= ctx.plans.len() {
            let groups = self.make_groups(&ctx);
            self.post_step(a, PostCtx { direction: ctx.direction, groups, idx: 0 });
            return;
        }
        let plan = ctx.plans[ctx.idx].clone();
        let (sges, pool_slot, cost) = match plan.kind {
            MrKind::PreRegistered => match self.session.mempool.try_acquire() {
                None => {
                    self.session.mempool.waiters.push_back(a);
                    self.park_actor(a, ActorCont::Build { ctx });
                    return;
                }
                Some(slot) => {
                    let cost =
                        self.cfg.mr_cost.mr_cost(self.cfg.space, MrKind::PreRegistered, plan.bytes);
                    // One contiguous SGE after the copy.
                    (
                        vec![ScatterGatherEntry { local_addr: 0, len: plan.bytes, mr_ref: slot }],
                        Some(slot),
                        cost,
                    )
                }
            },
            MrKind::Dynamic => {
                let (mr, cost) = self.register_mr(self.cfg.space, plan.bytes, MrKind::Dynamic);
                // One SGE per source buffer.
                let mut off = 0;
                let sges = plan
                    .requests
                    .iter()
                    .map(|r| {
                        let sge =
                            ScatterGatherEntry { local_addr: off, len: r.len, mr_ref: mr };
                        off += r.len;
                        sge
                    })
                    .collect();
                (sges, None, cost)
            }
        };
        let wr_id = WrId(self.wrs.len());
        let first = &plan.requests[0];
        let opcode = match ctx.direction {
            Direction::Read => Opcode::RdmaRead,
            Direction::Write => Opcode::RdmaWrite,
        };
        if plan.requests.len() > 1 {
            self.metrics.counters.merges += plan.requests.len() as u64 - 1;
        }
        self.wrs.push(WorkRequest {
            wr_id,
            qp: QpId(usize::MAX), // assigned at post
            opcode,
            sge_list: sges,
            remote_addr: first.remote_addr,
            covers: plan.requests.iter().map(|r| r.req_id).collect(),
            chain_next: None,
            signaled: true,
            len: plan.bytes,
            pool_slot,
            posted_at: SimTime::ZERO,
        });
        ctx.built.push(wr_id);
        ctx.idx += 1;
        let cost = self.scale.apply(cost);
        self.schedule_actor(a, now.add(cost), ActorCont::Build { ctx }, false);
    }

    fn make_groups(&self, ctx: &BatchCtx) -> Vec<PostGroup> {
        // Group in plan order by destination node, preserving per-node order.
        let segs: Vec<Vec<DataRequest>> =
            ctx.plans.iter().map(|p| p.requests.clone()).collect();
        let grouped = group_by_node(segs);
        let mut by_node: Vec<(NodeId, Vec<WrId>)> =
            grouped.iter().map(|(n, _)| (*n, Vec::new())).collect();
        for (i, plan) in ctx.plans.iter().enumerate() {
            let node = plan.requests[0].node;
            let entry = by_node.iter_mut().find(|(n, _)| *n == node).unwrap();
            entry.1.push(ctx.built[i]);
        }
        by_node
            .into_iter()
            .map(|(node, wrs)| PostGroup { node, qp: None, wrs })
            .collect()
    }

    /// Post each node group: one doorbell per chain in chaining modes, one
    /// per WR otherwise. Send-queue overflow parks the actor until
    /// completions are reaped.
    fn post_step(&mut self, a: usize, mut ctx: PostCtx) {
        let now = self.q.now();
        while ctx.idx < ctx.groups.len() {
            if ctx.groups[ctx.idx].qp.is_none() {
                let node = ctx.groups[ctx.idx].node;
                ctx.groups[ctx.idx].qp = Some(self.session.pick_qp(node));
            }
            let group = ctx.groups[ctx.idx].clone();
            let qp = group.qp.unwrap();
            if self.qps[qp.0].free_slots() < group.wrs.len() {
                self.qps[qp.0].waiters.push_back(a);
                self.park_actor(a, ActorCont::Post { ctx });
                return;
            }
            assert!(self.session.handler_registered, "post before handler registration");
            self.qps[qp.0].unreaped += group.wrs.len();
            for &wr in &group.wrs {
                self.wrs[wr.0].qp = qp;
                self.wrs[wr.0].posted_at = now;
            }
            if self.cfg.mode.chains() && group.wrs.len() > 1 {
                for w in group.wrs.windows(2) {
                    self.wrs[w[0].0].chain_next = Some(w[1]);
                }
                self.metrics.counters.chains += group.wrs.len() as u64 - 1;
                self.post_send(now, &group.wrs);
            } else {
                for &wr in &group.wrs {
                    self.post_send(now, &[wr]);
                }
            }
            ctx.idx += 1;
        }
        // Batch posted: rescan; the queue may have stacked meanwhile.
        self.scan(a, ctx.direction, false);
    }

    /// Hand a chain to the NIC: one MMIO, N-1 DMA reads, cache updates.
    fn post_send(&mut self, now: SimTime, chain: &[WrId]) {
        let miss_qp0 = self.metrics.counters.qp_cache_miss;
        let miss_mpt0 = self.metrics.counters.mpt_cache_miss;
        let chain_refs: Vec<&WorkRequest> = chain.iter().map(|w| &self.wrs[w.0]).collect();
        let qp = chain_refs[0].qp.0;
        self.nic.accept_post(now, &chain_refs, &mut self.metrics.counters);
        self.post_log.push(PostLogEntry {
            qp,
            chain_len: chain.len() as u32,
            qp_miss: self.metrics.counters.qp_cache_miss > miss_qp0,
            mpt_misses: (self.metrics.counters.mpt_cache_miss - miss_mpt0) as u32,
        });
        self.post_order.push(chain.iter().map(|w| w.0).collect());
        self.metrics.in_flight_ops += chain.len() as u64;
        if !self.nic.stepping {
            self.nic.stepping = true;
            self.q.schedule(self.nic.busy_until(), EventKind::NicStep);
        }
    }

    // ---- NIC events ----

    fn nic_step(&mut self) {
        let now = self.q.now();
        let miss0 = self.metrics.counters.wqe_cache_miss;
        match self.nic.process_one(now, &self.wrs, &mut self.metrics.counters) {
            Some(done) => {
                self.process_log.push(ProcessLogEntry {
                    wr: done.wr.0,
                    wqe_miss: self.metrics.counters.wqe_cache_miss > miss0,
                });
                let wr = &self.wrs[done.wr.0];
                let qp = wr.qp;
                // RC QPs complete in post order; clamp against reordering
                // from length-dependent wire times.
                let at = done.wire_done_at.max(self.qps[qp.0].last_completion_at);
                self.qps[qp.0].last_completion_at = at;
                let wc_idx = self.wcs.len();
                self.wcs.push(WorkCompletion {
                    wr_id: done.wr,
                    status: WcStatus::Success,
                    completed_at: at,
                    covers: wr.covers.clone(),
                });
                let cq = self.qps[qp.0].cq;
                self.q.schedule(at, EventKind::CompletionDelivery { cq: cq.0, wc: wc_idx });
                if self.nic.backlog() > 0 {
                    self.q.schedule(self.nic.busy_until(), EventKind::NicStep);
                } else {
                    self.nic.stepping = false;
                }
            }
            None => {
                self.nic.stepping = false;
            }
        }
    }

    fn completion_delivery(&mut self, cq_idx: usize, wc_idx: usize) {
        let now = self.q.now();
        let wc = &self.wcs[wc_idx];
        let wr = &self.wrs[wc.wr_id.0];
        self.metrics.io_completion_time.record(now.saturating_sub(wr.posted_at));
        self.metrics.in_flight_ops -= 1;
        self.delivery_log.push((wr.qp.0, wc.wr_id.0));
        self.nic.retire_wqe(wc.wr_id);
        let fires = self.cqs[cq_idx].deliver(wc_idx);
        let poller_idx = self.cqs[cq_idx].poller;
        if fires {
            self.fire_interrupt(poller_idx, now);
        } else if self.pollers[poller_idx].mode == PollerMode::Spinning {
            self.wake_parked_poller(poller_idx, now);
        }
    }

    fn fire_interrupt(&mut self, poller_idx: usize, now: SimTime) {
        self.metrics.counters.interrupts += 1;
        self.metrics.counters.context_switches += 1;
        let entry_at =
            now.add(self.cfg.nic.interrupt_cost_ns + self.cfg.nic.context_switch_cost_ns);
        self.q.schedule(entry_at, EventKind::Interrupt { poller: poller_idx });
    }

    // ---- pollers ----

    fn interrupt_entry(&mut self, poller_idx: usize) {
        let p = &mut self.pollers[poller_idx];
        debug_assert_eq!(p.mode, PollerMode::ArmedIdle);
        p.mode = PollerMode::Polling;
        p.interrupts_taken += 1;
        p.cpu_busy_ns +=
            self.cfg.nic.interrupt_cost_ns + self.cfg.nic.context_switch_cost_ns;
        self.poll_batch(poller_idx);
    }

    fn wake_parked_poller(&mut self, poller_idx: usize, now: SimTime) {
        let poll_cost = self.cfg.cpu.poll_cq_cost_ns;
        let p = &mut self.pollers[poller_idx];
        debug_assert_eq!(p.mode, PollerMode::Spinning);
        let park_started = p.park_started.expect("spinning poller without park time");
        // Wake on the poll grid: the first notional poll at or after now.
        let elapsed = now.saturating_sub(park_started);
        let steps = elapsed.div_ceil(poll_cost).max(1);
        let mut wake_at = park_started.add(steps * poll_cost);
        if let Some(deadline) = p.window_deadline {
            wake_at = wake_at.min(deadline);
        }
        let gen = p.bump_gen();
        self.q.schedule(wake_at, EventKind::PollerStep { poller: poller_idx, gen });
    }

    fn poller_step(&mut self, poller_idx: usize, gen: u64) {
        let now = self.q.now();
        let p = &mut self.pollers[poller_idx];
        if gen != p.gen {
            return; // stale step after an early wake
        }
        if p.mode == PollerMode::Spinning {
            // Leaving a parked spin: account the spin time and the empty
            // polls it covered, then poll.
            let park_started = p.park_started.take().unwrap();
            let spun = now.saturating_sub(park_started);
            p.cpu_busy_ns += spun;
            if p.window_deadline.take().is_some() {
                let poll_cost = self.cfg.cpu.poll_cq_cost_ns;
                let empty_polls = (spun / poll_cost).saturating_sub(1);
                p.retry = p.retry.saturating_add(empty_polls as u32);
            }
            p.mode = PollerMode::Polling;
            self.poll_batch(poller_idx);
        } else if !self.pollers[poller_idx].backlog.is_empty() {
            self.handle_one(poller_idx);
        } else {
            self.poll_batch(poller_idx);
        }
    }

    fn poll_batch(&mut self, poller_idx: usize) {
        let now = self.q.now();
        let strategy = self.cfg.strategy;
        let batch = strategy.poll_batch();
        let cq_idx = self.pollers[poller_idx].cq;
        let polled = self.cqs[cq_idx].poll(batch);
        self.metrics.counters.wc_polled += polled.len() as u64;
        self.pollers[poller_idx].cpu_busy_ns += self.cfg.cpu.poll_cq_cost_ns;
        // Reap: free send-queue slots at poll time.
        for &wc_idx in &polled {
            let qp = self.wrs[self.wcs[wc_idx].wr_id.0].qp;
            self.qps[qp.0].unreaped -= 1;
            while self.qps[qp.0].free_slots() > 0 {
                match self.qps[qp.0].waiters.pop_front() {
                    Some(actor) => self.wake_actor(actor, now),
                    None => break,
                }
            }
        }
        if polled.is_empty() {
            match strategy {
                PollingStrategy::EventTriggered
                | PollingStrategy::EventBatch { .. }
                | PollingStrategy::Hybrid => self.arm_and_idle(poller_idx),
                PollingStrategy::Adaptive { max_retry, .. } => {
                    let p = &mut self.pollers[poller_idx];
                    if p.retry >= max_retry {
                        self.arm_and_idle(poller_idx);
                    } else {
                        p.retry += 1;
                        let remaining = (max_retry - p.retry) as u64 + 1;
                        let deadline =
                            now.add(remaining * self.cfg.cpu.poll_cq_cost_ns);
                        p.mode = PollerMode::Spinning;
                        p.park_started = Some(now);
                        p.window_deadline = Some(deadline);
                        let gen = p.bump_gen();
                        self.q.schedule(
                            deadline,
                            EventKind::PollerStep { poller: poller_idx, gen },
                        );
                    }
                }
                PollingStrategy::Busy | PollingStrategy::SharedCq { .. } => {
                    let p = &mut self.pollers[poller_idx];
                    p.mode = PollerMode::Spinning;
                    p.park_started = Some(now);
                    p.window_deadline = None;
                    p.bump_gen(); // invalidate anything stale
                }
            }
        } else {
            let p = &mut self.pollers[poller_idx];
            p.backlog.extend(polled);
            let gen = p.gen;
            self.q.schedule(
                now.add(self.cfg.cpu.poll_cq_cost_ns + self.cfg.cpu.handle_wc_cost_ns),
                EventKind::PollerStep { poller: poller_idx, gen },
            );
        }
    }

    fn arm_and_idle(&mut self, poller_idx: usize) {
        let now = self.q.now();
        let p = &mut self.pollers[poller_idx];
        p.finish_entry();
        p.retry = 0;
        p.mode = PollerMode::ArmedIdle;
        let cq_idx = p.cq;
        if self.cqs[cq_idx].request_notify() {
            // Completions landed during handling: the immediate-interrupt
            // rule closes the missed-event race.
            self.fire_interrupt(poller_idx, now);
        }
    }

    /// Handle one completion to completion (run-to-completion model):
    /// retire covered requests, free admission bytes, release the pool
    /// slot, and wake anything that was blocked on those resources.
    fn handle_one(&mut self, poller_idx: usize) {
        let now = self.q.now();
        let wc_idx = self.pollers[poller_idx].backlog.pop_front().unwrap();
        self.pollers[poller_idx].cpu_busy_ns += self.cfg.cpu.handle_wc_cost_ns;
        self.pollers[poller_idx].entry_wcs += 1;

        let covers = self.wcs[wc_idx].covers.clone();
        let wr_id = self.wcs[wc_idx].wr_id;
        let mut freed = 0u64;
        let mut last_latency = 0u64;
        for req in &covers {
            let idx = req.0 as usize;
            self.req_covered[idx] = self.req_covered[idx].saturating_add(1);
            if self.req_covered[idx] != 1 {
                self.violation(format!("req {idx} covered {} times", self.req_covered[idx]));
            }
            let latency = now.saturating_sub(self.req_issue_at[idx]);
            self.metrics.request_latency.record(latency);
            last_latency = latency;
            freed += self.regulator.round_up(self.trace[idx].len);
            let actor = self.trace[idx].origin_actor;
            self.actors[actor].outstanding -= 1;
        }
        self.metrics.requests_completed(covers.len() as u64, now);

        let woken = self.regulator.on_completion(freed, last_latency);
        self.metrics.in_flight_bytes = self.regulator.in_flight_bytes();
        for actor in woken {
            self.wake_actor(actor, now);
        }

        if let Some(slot) = self.wrs[wr_id.0].pool_slot {
            self.session.mempool.release(slot);
            if let Some(w) = self.session.mempool.waiters.pop_front() {
                self.wake_actor(w, now);
            }
        }

        // Pipeline and pack waiters of the covered requests' actors.
        for req in &covers {
            let actor = self.trace[req.0 as usize].origin_actor;
            let ac = &self.actors[actor];
            let pipeline_ok = ac.waiting_pipeline
                && (self.cfg.pipeline_depth == 0
                    || ac.outstanding < self.cfg.pipeline_depth as u64);
            let pack_ok = ac.waiting_pack && ac.outstanding == 0;
            if !pipeline_ok && !pack_ok {
                continue;
            }
            let rec_at = self.trace[ac.records[ac.next]].arrive_at;
            if pipeline_ok {
                self.actors[actor].waiting_pipeline = false;
                self.wake_actor(actor, rec_at.max(now));
            } else {
                self.actors[actor].waiting_pack = false;
                self.wake_actor(actor, rec_at.max(now.add(self.cfg.inter_burst_gap_ns)));
            }
        }

        // Next step: rest of the backlog, or back to polling.
        let p = &mut self.pollers[poller_idx];
        if !p.backlog.is_empty() {
            let gen = p.gen;
            self.q.schedule(
                now.add(self.cfg.cpu.handle_wc_cost_ns),
                EventKind::PollerStep { poller: poller_idx, gen },
            );
            return;
        }
        // Batch done.
        match self.cfg.strategy {
            PollingStrategy::EventTriggered | PollingStrategy::EventBatch { .. } => {
                self.arm_and_idle(poller_idx);
            }
            PollingStrategy::Hybrid => self.poll_batch(poller_idx),
            PollingStrategy::Adaptive { reset_retry_on_success, .. } => {
                if reset_retry_on_success {
                    self.pollers[poller_idx].retry = 0;
                }
                self.poll_batch(poller_idx);
            }
            PollingStrategy::Busy | PollingStrategy::SharedCq { .. } => {
                self.poll_batch(poller_idx)
            }
        }
    }

    // ---- run loop ----

    fn init(&mut self) {
        // Arm event-driven CQs; park spinners from the start.
        if self.cfg.strategy.is_spinner() {
            for i in 0..self.pollers.len() {
                let p = &mut self.pollers[i];
                p.mode = PollerMode::Spinning;
                p.park_started = Some(SimTime::ZERO);
            }
        } else {
            for cq in &mut self.cqs {
                let fired = cq.request_notify();
                debug_assert!(!fired);
            }
        }
        for a in 0..self.actors.len() {
            if self.actors[a].records.is_empty() {
                self.actors[a].done = true;
            } else {
                let at = self.trace[self.actors[a].records[0]].arrive_at;
                self.schedule_actor(a, at, ActorCont::IssueNext, true);
            }
        }
        if self.cfg.sample_every_ns > 0 {
            self.q.schedule(SimTime::ZERO, EventKind::SampleTick);
        }
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::PostArrival { actor } | EventKind::ActorWakeup { actor } => {
                self.actor_step(actor)
            }
            EventKind::NicStep => self.nic_step(),
            EventKind::CompletionDelivery { cq, wc } => self.completion_delivery(cq, wc),
            EventKind::Interrupt { poller } => self.interrupt_entry(poller),
            EventKind::PollerStep { poller, gen } => self.poller_step(poller, gen),
            EventKind::SampleTick => {
                let now = self.q.now();
                self.metrics.sample(now);
                if !self.q.is_empty() {
                    self.q.schedule_in(self.cfg.sample_every_ns, EventKind::SampleTick);
                }
            }
        }
        self.regulator.check_bound();
    }

    /// Run to quiescence (or the safety cap). Consumes the engine.
    pub fn run(mut self) -> EngineResult {
        self.init();
        let deadline = SimTime(self.cfg.max_sim_ns);
        while let Some(ev) = self.q.pop_due(deadline) {
            self.dispatch(ev.kind);
        }
        let truncated = !self.q.is_empty();
        self.finalize(truncated);
        let mut cpu_total = 0;
        let mut poller_entries = Vec::new();
        let mut poller_interrupts = Vec::new();
        let mut poller_cpu = Vec::new();
        let end = self.q.now();
        for p in &mut self.pollers {
            if let Some(start) = p.park_started.take() {
                // Spinners parked at quiescence burned CPU the whole time.
                p.cpu_busy_ns += end.saturating_sub(start);
            }
            cpu_total += p.cpu_busy_ns;
            poller_entries.push(std::mem::take(&mut p.entries));
            poller_interrupts.push(p.interrupts_taken);
            poller_cpu.push(p.cpu_busy_ns);
        }
        self.metrics.cpu_busy_time = cpu_total;
        EngineResult {
            metrics: self.metrics,
            violations: self.violations,
            truncated,
            final_clock: end,
            nic_charged_ns: self.nic.charged_ns,
            post_log: self.post_log,
            process_log: self.process_log,
            post_order: self.post_order,
            delivery_log: self.delivery_log,
            poller_entries,
            poller_interrupts,
            poller_cpu_ns: poller_cpu,
        }
    }

    fn finalize(&mut self, truncated: bool) {
        if truncated {
            self.violation(format!(
                "run truncated at safety cap {}ns with {} events pending",
                self.cfg.max_sim_ns,
                self.q.len()
            ));
            return;
        }
        let c = &self.metrics.counters;
        if c.requests_completed != c.requests_in {
            self.violations.push(format!(
                "conservation: completed {} != in {}",
                c.requests_completed, c.requests_in
            ));
        }
        if self.metrics.in_flight_bytes != 0 || self.regulator.in_flight_bytes() != 0 {
            self.violations
                .push(format!("in_flight_bytes {} at quiescence", self.metrics.in_flight_bytes));
        }
        if self.metrics.in_flight_ops != 0 {
            self.violations
                .push(format!("in_flight_ops {} at quiescence", self.metrics.in_flight_ops));
        }
        if self.write_q.len() + self.read_q.len() != 0 {
            self.violations.push("merge queues not drained".into());
        }
        if self.session.mempool.in_flight() != 0 {
            self.violations.push("pool slots leaked".into());
        }
        for (idx, &n) in self.req_covered.iter().enumerate() {
            if n != 1 {
                self.violations.push(format!("req {idx} covered {n} times"));
                break;
            }
        }
        for qp in &self.qps {
            if qp.unreaped != 0 {
                self.violations.push(format!("qp {} has {} unreaped WRs", qp.qp_id.0, qp.unreaped));
            }
        }
    }
}
