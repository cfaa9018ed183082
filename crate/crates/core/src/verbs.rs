//! The RDMA-verbs-shaped data model: requests, work requests, memory
//! regions, queue pairs, completion queues, and the pre-registered message
//! pool.
//!
//! These are plain state holders; timed behavior (cost charging, event
//! scheduling) lives in the engine so a run stays a pure function of its
//! inputs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReqId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WrId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QpId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CqId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MrId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

/// An application-level read or write against a peer's memory; the unit of
/// merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataRequest {
    pub req_id: ReqId,
    pub direction: Direction,
    pub node: NodeId,
    pub remote_addr: u64,
    pub len: u64,
    pub arrive_at: SimTime,
    pub origin_actor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrKind {
    PreRegistered,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddressSpace {
    Kernel,
    User,
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryRegion {
    pub mr_id: MrId,
    pub base: u64,
    pub len: u64,
    pub kind: MrKind,
    pub space: AddressSpace,
    pub registered_at: SimTime,
}

#[derive(Debug, Clone, Copy)]
pub struct ScatterGatherEntry {
    pub local_addr: u64,
    pub len: u64,
    pub mr_ref: MrId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    RdmaRead,
    RdmaWrite,
}

/// A NIC work-queue element. `covers` lists the data requests this WQE
/// carries; merged WRs cover several address-contiguous same-node requests.
#[derive(Debug, Clone)]
pub struct WorkRequest {
    pub wr_id: WrId,
    pub qp: QpId,
    pub opcode: Opcode,
    pub sge_list: Vec<ScatterGatherEntry>,
    pub remote_addr: u64,
    pub covers: Vec<ReqId>,
    pub chain_next: Option<WrId>,
    pub signaled: bool,
    /// Total payload bytes (sum of SGE lengths).
    pub len: u64,
    /// Pool slot to release when the completion is handled, if preMR.
    pub pool_slot: Option<MrId>,
    pub posted_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcStatus {
    Success,
    Flushed,
}

#[derive(Debug, Clone)]
pub struct WorkCompletion {
    pub wr_id: WrId,
    pub status: WcStatus,
    pub completed_at: SimTime,
    pub covers: Vec<ReqId>,
}

#[derive(Debug)]
pub struct QueuePair {
    pub qp_id: QpId,
    pub node: NodeId,
    pub send_queue_depth: usize,
    pub cq: CqId,
    /// Posted WRs whose completions have not been reaped via poll_cq.
    pub unreaped: usize,
    /// Actors blocked on send-queue room, FIFO.
    pub waiters: VecDeque<usize>,
    /// Clamp so completions on one QP deliver in post order.
    pub last_completion_at: SimTime,
}

impl QueuePair {
    pub fn free_slots(&self) -> usize {
        self.send_queue_depth - self.unreaped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqOwner {
    PerQp,
    Shared,
}

#[derive(Debug)]
pub struct CompletionQueue {
    pub cq_id: CqId,
    pub entries: VecDeque<usize>,
    pub capacity: usize,
    pub notify_armed: bool,
    pub owner: CqOwner,
    /// Poller wired to this CQ.
    pub poller: usize,
}

impl CompletionQueue {
    /// Append a delivered completion index. Returns true when an armed
    /// notify must fire an interrupt (and disarms it).
    pub fn deliver(&mut self, wc_index: usize) -> bool {
        assert!(self.entries.len() < self.capacity, "CQ overflow: capacity {}", self.capacity);
        self.entries.push_back(wc_index);
        if self.notify_armed {
            self.notify_armed = false;
            true
        } else {
            false
        }
    }

    /// Remove and return up to `max` completions in FIFO order.
    pub fn poll(&mut self, max: usize) -> Vec<usize> {
        assert!(max >= 1, "poll_cq max must be >= 1");
        let n = max.min(self.entries.len());
        self.entries.drain(..n).collect()
    }

    /// Arm completion notification. Returns true when the CQ already holds
    /// entries, in which case the interrupt fires immediately; this closes
    /// the missed-event race between a failed poll and arming. Arming twice
    /// is idempotent.
    pub fn request_notify(&mut self) -> bool {
        if !self.entries.is_empty() {
            self.notify_armed = false;
            true
        } else {
            self.notify_armed = true;
            false
        }
    }
}

/// Free list of fixed-size pre-registered regions. Exhaustion parks the
/// caller; a slot is owned by at most one in-flight WR.
#[derive(Debug)]
pub struct MessagePool {
    pub slot_len: u64,
    free: Vec<MrId>,
    pub waiters: VecDeque<usize>,
    in_flight: usize,
}

impl MessagePool {
    pub fn new(slots: Vec<MrId>, slot_len: u64) -> Self {
        MessagePool { slot_len, free: slots, waiters: VecDeque::new(), in_flight: 0 }
    }

    pub fn try_acquire(&mut self) -> Option<MrId> {
        let slot = self.free.pop();
        if slot.is_some() {
            self.in_flight += 1;
        }
        slot
    }

    pub fn release(&mut self, slot: MrId) {
        debug_assert!(!self.free.contains(&slot), "double release of pool slot {:?}", slot);
        self.in_flight -= 1;
        self.free.push(slot);
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn free_slots(&self) -> usize {
        self.free.len()
    }
}

/// Per-run wiring of peers to queue pairs plus the message pool. QPs are
/// pre-wired at scenario start; the completion handler must be registered
/// before the first post.
#[derive(Debug)]
pub struct Session {
    /// peers[node] -> QP ids for that node.
    pub peers: Vec<Vec<QpId>>,
    pub mempool: MessagePool,
    pub handler_registered: bool,
    /// Round-robin cursor per node for multi-QP posting.
    qp_cursor: Vec<usize>,
    pub space: AddressSpace,
}

impl Session {
    pub fn new(peers: Vec<Vec<QpId>>, mempool: MessagePool, space: AddressSpace) -> Self {
        let qp_cursor = vec![0; peers.len()];
        Session { peers, mempool, handler_registered: false, qp_cursor, space }
    }

    /// Next QP for `node`, round-robin.
    pub fn pick_qp(&mut self, node: NodeId) -> QpId {
        let qps = &self.peers[node.0 as usize];
        let cursor = &mut self.qp_cursor[node.0 as usize];
        let qp = qps[*cursor % qps.len()];
        *cursor = (*cursor + 1) % qps.len();
        qp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cq(capacity: usize) -> CompletionQueue {
        CompletionQueue {
            cq_id: CqId(0),
            entries: VecDeque::new(),
            capacity,
            notify_armed: false,
            owner: CqOwner::PerQp,
            poller: 0,
        }
    }

    #[test]
    fn poll_returns_fifo_and_drains() {
        let mut c = cq(32);
        for i in 0..5 {
            c.deliver(i);
        }
        assert_eq!(c.poll(16), vec![0, 1, 2, 3, 4]);
        assert!(c.poll(16).is_empty());
    }

    #[test]
    fn poll_respects_max() {
        let mut c = cq(32);
        for i in 0..20 {
            c.deliver(i);
        }
        assert_eq!(c.poll(16).len(), 16);
        assert_eq!(c.entries.len(), 4);
    }

    #[test]
    fn arm_on_nonempty_fires_immediately() {
        let mut c = cq(8);
        c.deliver(0);
        assert!(c.request_notify());
        assert!(!c.notify_armed);
    }

    #[test]
    fn arm_then_deliver_fires_once() {
        let mut c = cq(8);
        assert!(!c.request_notify());
        // Arming twice stays a single armed state.
        assert!(!c.request_notify());
        assert!(c.deliver(0));
        // Disarmed now; a second delivery does not fire.
        assert!(!c.deliver(1));
    }

    #[test]
    fn mempool_blocks_by_returning_none() {
        let slots = vec![MrId(0), MrId(1)];
        let mut pool = MessagePool::new(slots, 128 * 1024);
        let a = pool.try_acquire().unwrap();
        let _b = pool.try_acquire().unwrap();
        assert!(pool.try_acquire().is_none());
        pool.release(a);
        assert!(pool.try_acquire().is_some());
    }
}
