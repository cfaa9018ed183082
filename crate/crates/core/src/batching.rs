//! Merge queue and the merge-and-chain engine: adjacency checking, greedy
//! in-queue-order merging, doorbell chain grouping, and the earliest-
//! thread-wins consumer token.
//!
//! Merging is opportunistic, never enforced: whoever holds the consumer
//! token batches whatever has stacked up; everyone else enqueues and
//! returns. A thread that arrives alone posts its own request as a single
//! WR. The token release re-checks the queue so a request enqueued during
//! the holder's final scan is never stranded.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::verbs::{AddressSpace, DataRequest, Direction, MrKind, NodeId};

/// Relation between two queued requests, in queue order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeRelation {
    /// Same node and end-to-start contiguous: a merge candidate.
    Adjacent,
    /// Same node, not contiguous: a doorbell-chain candidate.
    Chainable,
    /// Different node.
    Unrelated,
}

/// Adjacency check for `a` preceding `b`. Only exact end-to-start
/// contiguity merges; overlapping writes keep their own WRs.
pub fn merge_check(a: &DataRequest, b: &DataRequest) -> MergeRelation {
    debug_assert_eq!(a.direction, b.direction, "merge_check crosses directions");
    if a.node != b.node {
        MergeRelation::Unrelated
    } else if a.remote_addr + a.len == b.remote_addr {
        MergeRelation::Adjacent
    } else {
        MergeRelation::Chainable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One WR per request, one doorbell per WR.
    Single,
    /// Merge adjacent runs; every WR gets its own doorbell.
    Merge,
    /// No merging; same-node WRs chained behind one doorbell.
    Doorbell,
    /// Merge adjacent runs, then chain the resulting WRs.
    Hybrid,
}

impl BatchMode {
    pub fn merges(self) -> bool {
        matches!(self, BatchMode::Merge | BatchMode::Hybrid)
    }

    pub fn chains(self) -> bool {
        matches!(self, BatchMode::Doorbell | BatchMode::Hybrid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "threshold_bytes")]
pub enum MrStrategy {
    ForcePre,
    ForceDyn,
    /// preMR below the threshold, dynMR at or above it; kernel space is
    /// always dynMR.
    AutoThreshold(u64),
}

impl MrStrategy {
    pub fn pick(self, space: AddressSpace, len: u64) -> MrKind {
        match self {
            MrStrategy::ForcePre => MrKind::PreRegistered,
            MrStrategy::ForceDyn => MrKind::Dynamic,
            MrStrategy::AutoThreshold(threshold) => match space {
                AddressSpace::Kernel => MrKind::Dynamic,
                AddressSpace::User => {
                    if len < threshold {
                        MrKind::PreRegistered
                    } else {
                        MrKind::Dynamic
                    }
                }
            },
        }
    }
}

pub const DEFAULT_MR_THRESHOLD: u64 = 928 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub max_chaining_size: usize,
    pub mr_strategy: MrStrategy,
    pub max_merged_bytes: u64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy {
            max_chaining_size: 16,
            mr_strategy: MrStrategy::AutoThreshold(DEFAULT_MR_THRESHOLD),
            max_merged_bytes: 1024 * 1024,
        }
    }
}

impl BatchPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_chaining_size < 1 {
            return Err("batching.max_chaining_size must be >= 1".into());
        }
        if self.max_merged_bytes == 0 {
            return Err("batching.max_merged_bytes must be positive".into());
        }
        Ok(())
    }
}

/// Greedy planner. Requests are fed in dequeue order; adjacent same-node
/// runs collapse into one segment when the mode merges, capped by
/// `max_merged_bytes`. No sorting, no lookahead.
#[derive(Debug)]
pub struct BatchBuilder {
    mode: BatchMode,
    max_merged_bytes: u64,
    runs: Vec<Vec<DataRequest>>,
}

impl BatchBuilder {
    pub fn new(mode: BatchMode, policy: &BatchPolicy) -> Self {
        BatchBuilder { mode, max_merged_bytes: policy.max_merged_bytes, runs: Vec::new() }
    }

    pub fn push(&mut self, r: DataRequest) {
        if self.mode.merges() {
            if let Some(run) = self.runs.last_mut() {
                let last = run.last().unwrap();
                let run_bytes: u64 = run.iter().map(|q| q.len).sum();
                if merge_check(last, &r) == MergeRelation::Adjacent
                    && run_bytes + r.len <= self.max_merged_bytes
                {
                    run.push(r);
                    return;
                }
            }
        }
        self.runs.push(vec![r]);
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    /// Segments in dequeue order, then grouped per node for chaining.
    pub fn finish(self) -> Vec<Vec<DataRequest>> {
        self.runs
    }
}

/// Group consecutive planned segments by destination node. Chains never
/// cross nodes; order within a node is preserved.
pub fn group_by_node(segments: Vec<Vec<DataRequest>>) -> Vec<(NodeId, Vec<Vec<DataRequest>>)> {
    let mut groups: Vec<(NodeId, Vec<Vec<DataRequest>>)> = Vec::new();
    for seg in segments {
        let node = seg[0].node;
        match groups.iter_mut().find(|(n, _)| *n == node) {
            Some((_, segs)) => segs.push(seg),
            None => groups.push((node, vec![seg])),
        }
    }
    groups
}

/// The single per-direction merge queue of the event-kernel path. One
/// consumer token serializes batching: the earliest thread to reach the
/// merge step carries everything queued so far.
#[derive(Debug)]
pub struct MergeQueue {
    pub direction: Direction,
    entries: VecDeque<DataRequest>,
    pub capacity: usize,
    token_held: bool,
    /// Actors blocked on a full queue, FIFO.
    pub full_waiters: VecDeque<usize>,
}

impl MergeQueue {
    pub fn new(direction: Direction, capacity: usize) -> Self {
        assert!(capacity > 0);
        MergeQueue {
            direction,
            entries: VecDeque::new(),
            capacity,
            token_held: false,
            full_waiters: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn enqueue(&mut self, r: DataRequest) {
        assert!(!self.is_full(), "enqueue on full merge queue");
        debug_assert_eq!(r.direction, self.direction);
        self.entries.push_back(r);
    }

    pub fn peek(&self) -> Option<&DataRequest> {
        self.entries.front()
    }

    pub fn dequeue(&mut self) -> Option<DataRequest> {
        self.entries.pop_front()
    }

    pub fn try_acquire_token(&mut self) -> bool {
        if self.token_held {
            false
        } else {
            self.token_held = true;
            true
        }
    }

    /// Release the token, then re-check: a non-empty queue re-acquires it
    /// so requests enqueued during the holder's final scan are carried.
    pub fn release_and_recheck(&mut self) -> bool {
        assert!(self.token_held, "release without token");
        self.token_held = false;
        if !self.entries.is_empty() {
            self.token_held = true;
            true
        } else {
            false
        }
    }
}

#[derive(Debug)]
struct SyncQueueInner<T> {
    entries: VecDeque<T>,
    token_held: bool,
}

/// Thread-safe merge queue for the concurrent stress mode: same protocol
/// as [`MergeQueue`], real blocking on capacity.
#[derive(Debug)]
pub struct SyncMergeQueue<T> {
    inner: Mutex<SyncQueueInner<T>>,
    space_freed: Condvar,
    capacity: usize,
}

impl<T> SyncMergeQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        SyncMergeQueue {
            inner: Mutex::new(SyncQueueInner { entries: VecDeque::new(), token_held: false }),
            space_freed: Condvar::new(),
            capacity,
        }
    }

    /// Enqueue (blocking on a full queue) and try to take the consumer
    /// token in the same critical section. Returns true when the caller
    /// became the consumer.
    pub fn enqueue_and_try_consume(&self, item: T) -> bool {
        let mut st = self.inner.lock().unwrap();
        while st.entries.len() >= self.capacity {
            st = self.space_freed.wait(st).unwrap();
        }
        st.entries.push_back(item);
        if st.token_held {
            false
        } else {
            st.token_held = true;
            true
        }
    }

    /// Holder only: take up to `max` queued items.
    pub fn drain_batch(&self, max: usize) -> Vec<T> {
        let mut st = self.inner.lock().unwrap();
        debug_assert!(st.token_held);
        let n = max.min(st.entries.len());
        let batch: Vec<T> = st.entries.drain(..n).collect();
        if n > 0 {
            self.space_freed.notify_all();
        }
        batch
    }

    /// Holder only: release the token; re-acquire when the queue turned
    /// non-empty in the meantime. Returns true when the caller must keep
    /// consuming.
    pub fn release_and_recheck(&self) -> bool {
        let mut st = self.inner.lock().unwrap();
        debug_assert!(st.token_held);
        st.token_held = false;
        if st.entries.is_empty() {
            false
        } else {
            st.token_held = true;
            true
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimTime;
    use crate::verbs::ReqId;

    fn req(id: u64, node: u16, addr: u64, len: u64) -> DataRequest {
        DataRequest {
            req_id: ReqId(id),
            direction: Direction::Write,
            node: NodeId(node),
            remote_addr: addr,
            len,
            arrive_at: SimTime::ZERO,
            origin_actor: 0,
        }
    }

    #[test]
    fn merge_check_examples() {
        let a = req(0, 0, 0x1000, 0x1000);
        assert_eq!(merge_check(&a, &req(1, 0, 0x2000, 0x1000)), MergeRelation::Adjacent);
        assert_eq!(merge_check(&a, &req(1, 0, 0x4000, 0x1000)), MergeRelation::Chainable);
        assert_eq!(merge_check(&a, &req(1, 1, 0x2000, 0x1000)), MergeRelation::Unrelated);
        // Overlap is not adjacency.
        assert_eq!(merge_check(&a, &req(1, 0, 0x1800, 0x1000)), MergeRelation::Chainable);
    }

    #[test]
    fn builder_merges_adjacent_run_into_one_segment() {
        let policy = BatchPolicy::default();
        let mut b = BatchBuilder::new(BatchMode::Hybrid, &policy);
        b.push(req(0, 0, 0x0, 0x20000));
        b.push(req(1, 0, 0x20000, 0x20000));
        b.push(req(2, 0, 0x40000, 0x20000));
        let segs = b.finish();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len(), 3);
    }

    #[test]
    fn builder_splits_on_gap_and_respects_byte_cap() {
        let policy = BatchPolicy { max_merged_bytes: 0x40000, ..Default::default() };
        let mut b = BatchBuilder::new(BatchMode::Merge, &policy);
        b.push(req(0, 0, 0x0, 0x20000));
        b.push(req(1, 0, 0x20000, 0x20000));
        // Adjacent but the run is at the byte cap: new segment.
        b.push(req(2, 0, 0x40000, 0x20000));
        // Gap: new segment.
        b.push(req(3, 0, 0x80000, 0x20000));
        let segs = b.finish();
        assert_eq!(segs.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1, 1]);
    }

    #[test]
    fn single_and_doorbell_modes_never_merge() {
        let policy = BatchPolicy::default();
        for mode in [BatchMode::Single, BatchMode::Doorbell] {
            let mut b = BatchBuilder::new(mode, &policy);
            b.push(req(0, 0, 0x0, 0x1000));
            b.push(req(1, 0, 0x1000, 0x1000));
            assert_eq!(b.finish().len(), 2, "{mode:?} must keep one WR per request");
        }
    }

    #[test]
    fn grouping_keeps_nodes_apart() {
        let segs = vec![
            vec![req(0, 0, 0x0, 0x1000)],
            vec![req(1, 1, 0x0, 0x1000)],
            vec![req(2, 0, 0x4000, 0x1000)],
        ];
        let groups = group_by_node(segs);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, NodeId(0));
        assert_eq!(groups[0].1.len(), 2);
        assert_eq!(groups[1].0, NodeId(1));
    }

    #[test]
    fn mr_strategy_auto_picks_by_space_and_size() {
        let auto = MrStrategy::AutoThreshold(DEFAULT_MR_THRESHOLD);
        assert_eq!(auto.pick(AddressSpace::Kernel, 4 * 1024), MrKind::Dynamic);
        assert_eq!(auto.pick(AddressSpace::Kernel, 4 * 1024 * 1024), MrKind::Dynamic);
        assert_eq!(auto.pick(AddressSpace::User, 256 * 1024), MrKind::PreRegistered);
        assert_eq!(auto.pick(AddressSpace::User, 2 * 1024 * 1024), MrKind::Dynamic);
    }

    #[test]
    fn token_release_recheck_carries_late_enqueue() {
        let mut q = MergeQueue::new(Direction::Write, 64);
        assert!(q.try_acquire_token());
        // A racer enqueues after the holder's final empty scan.
        q.enqueue(req(0, 0, 0, 0x1000));
        // Release sees the new entry and re-acquires.
        assert!(q.release_and_recheck());
        assert!(q.dequeue().is_some());
        assert!(!q.release_and_recheck());
        // Token is free again.
        assert!(q.try_acquire_token());
    }
}
