//! Simulated NIC: MMIO/DMA posting costs, finite WQE/QP/MPT SRAM caches
//! with miss-refetch penalties, a serialized processing engine, and wire
//! transfer latency.
//!
//! The overload mechanism: WQEs are cached on post and consumed at
//! processing. Once the backlog exceeds the WQE cache, the LRU victim is
//! the next WQE to process, so every further work request pays a DMA
//! refetch and the effective service rate drops. That produces the
//! rise-then-fall IOPS curve under an actor sweep.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::metrics::Counters;
use crate::sim::SimTime;
use crate::verbs::{AddressSpace, MrKind, WorkRequest, WrId};

pub const PAGE: u64 = 4096;

/// NIC cost and capacity constants. Times are virtual nanoseconds;
/// per-byte costs are fractional nanoseconds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NicConfig {
    pub wqe_cache_slots: usize,
    pub qp_cache_slots: usize,
    pub mpt_cache_slots: usize,
    pub mmio_cost_ns: u64,
    pub dma_read_cost_ns: u64,
    pub cache_miss_refetch_cost_ns: u64,
    pub per_wqe_process_cost_ns: u64,
    pub per_byte_wire_ns: f64,
    pub interrupt_cost_ns: u64,
    pub context_switch_cost_ns: u64,
}

impl Default for NicConfig {
    fn default() -> Self {
        // A 128 KiB transfer takes ~23 us on the wire (~56 Gb/s class NIC).
        NicConfig {
            wqe_cache_slots: 256,
            qp_cache_slots: 64,
            mpt_cache_slots: 1024,
            mmio_cost_ns: 600,
            dma_read_cost_ns: 300,
            cache_miss_refetch_cost_ns: 500,
            per_wqe_process_cost_ns: 250,
            per_byte_wire_ns: 0.175,
            interrupt_cost_ns: 2_000,
            context_switch_cost_ns: 3_000,
        }
    }
}

impl NicConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.mmio_cost_ns <= self.dma_read_cost_ns {
            return Err(format!(
                "nic.mmio_cost_ns ({}) must exceed nic.dma_read_cost_ns ({})",
                self.mmio_cost_ns, self.dma_read_cost_ns
            ));
        }
        let costs = [
            ("mmio_cost_ns", self.mmio_cost_ns),
            ("dma_read_cost_ns", self.dma_read_cost_ns),
            ("cache_miss_refetch_cost_ns", self.cache_miss_refetch_cost_ns),
            ("per_wqe_process_cost_ns", self.per_wqe_process_cost_ns),
            ("interrupt_cost_ns", self.interrupt_cost_ns),
            ("context_switch_cost_ns", self.context_switch_cost_ns),
        ];
        for (name, v) in costs {
            if v == 0 {
                return Err(format!("nic.{name} must be positive"));
            }
        }
        if self.per_byte_wire_ns <= 0.0 {
            return Err("nic.per_byte_wire_ns must be positive".into());
        }
        if self.wqe_cache_slots == 0 || self.qp_cache_slots == 0 || self.mpt_cache_slots == 0 {
            return Err("nic cache slot counts must be positive".into());
        }
        Ok(())
    }

    pub fn wire_ns(&self, len: u64) -> u64 {
        (len as f64 * self.per_byte_wire_ns).round() as u64
    }
}

/// Memory registration vs memcpy cost model. PreMR pays a copy into an
/// already-registered slot; dynMR pays a registration over the data buffer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MrCostModel {
    pub kernel_reg_base_ns: u64,
    pub kernel_reg_per_page_ns: u64,
    pub user_reg_base_ns: u64,
    pub user_reg_per_page_ns: u64,
    pub memcpy_per_byte_ns: f64,
}

impl Default for MrCostModel {
    fn default() -> Self {
        // Calibrated so the user-space preMR/dynMR crossover sits at
        // ~928 KiB and kernel-space registration beats the copy at every
        // size in [4 KiB, 4 MiB].
        MrCostModel {
            kernel_reg_base_ns: 150,
            kernel_reg_per_page_ns: 12,
            user_reg_base_ns: 24_327,
            user_reg_per_page_ns: 100,
            memcpy_per_byte_ns: 0.05,
        }
    }
}

impl MrCostModel {
    /// Pure cost of preparing `len` bytes for posting.
    pub fn mr_cost(&self, space: AddressSpace, kind: MrKind, len: u64) -> u64 {
        assert!(len > 0, "mr_cost: len must be positive");
        match kind {
            MrKind::PreRegistered => (len as f64 * self.memcpy_per_byte_ns).round() as u64,
            MrKind::Dynamic => {
                let pages = len.div_ceil(PAGE);
                match space {
                    AddressSpace::Kernel => {
                        self.kernel_reg_base_ns + self.kernel_reg_per_page_ns * pages
                    }
                    AddressSpace::User => {
                        self.user_reg_base_ns + self.user_reg_per_page_ns * pages
                    }
                }
            }
        }
    }

    /// Size where user-space dynMR becomes cheaper than the copy, by
    /// bisection over whole bytes.
    pub fn user_crossover_bytes(&self) -> u64 {
        let (mut lo, mut hi) = (1u64, 64 << 20);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.mr_cost(AddressSpace::User, MrKind::Dynamic, mid)
                < self.mr_cost(AddressSpace::User, MrKind::PreRegistered, mid)
            {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.memcpy_per_byte_ns <= 0.0 {
            return Err("mr_cost.memcpy_per_byte_ns must be positive".into());
        }
        let crossover = self.user_crossover_bytes();
        if !(896 * 1024..=960 * 1024).contains(&crossover) {
            return Err(format!(
                "mr cost constants place the user-space crossover at {crossover} bytes, \
                 outside [896 KiB, 960 KiB]"
            ));
        }
        // Kernel space: registration must beat the copy across the block range.
        let mut s = 4 * 1024u64;
        while s <= 4 * 1024 * 1024 {
            if self.mr_cost(AddressSpace::Kernel, MrKind::Dynamic, s)
                >= self.mr_cost(AddressSpace::Kernel, MrKind::PreRegistered, s)
            {
                return Err(format!("kernel dynMR not cheaper than preMR at {s} bytes"));
            }
            s *= 2;
        }
        Ok(())
    }
}

/// Fixed-capacity LRU set over u64 keys. Insert/touch/remove are O(1);
/// nothing iterates the map, so determinism does not depend on hash order.
#[derive(Debug)]
pub struct LruCache {
    capacity: usize,
    map: HashMap<u64, usize>,
    // Slab of doubly-linked nodes: (key, prev, next). usize::MAX = none.
    nodes: Vec<(u64, usize, usize)>,
    free: Vec<usize>,
    head: usize, // most recently used
    tail: usize, // least recently used
}

const NIL: usize = usize::MAX;

impl LruCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        LruCache {
            capacity,
            map: HashMap::new(),
            nodes: Vec::new(),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    fn unlink(&mut self, idx: usize) {
        let (_, prev, next) = self.nodes[idx];
        if prev != NIL {
            self.nodes[prev].2 = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.nodes[next].1 = prev;
        } else {
            self.tail = prev;
        }
    }

    fn push_front(&mut self, idx: usize) {
        self.nodes[idx].1 = NIL;
        self.nodes[idx].2 = self.head;
        if self.head != NIL {
            self.nodes[self.head].1 = idx;
        }
        self.head = idx;
        if self.tail == NIL {
            self.tail = idx;
        }
    }

    /// Mark `key` used. Returns true on hit.
    pub fn touch(&mut self, key: u64) -> bool {
        if let Some(&idx) = self.map.get(&key) {
            self.unlink(idx);
            self.push_front(idx);
            true
        } else {
            false
        }
    }

    /// Insert `key` as most recently used, evicting the LRU entry if full.
    /// Returns the evicted key.
    pub fn insert(&mut self, key: u64) -> Option<u64> {
        if self.touch(key) {
            return None;
        }
        let mut evicted = None;
        if self.map.len() == self.capacity {
            let victim = self.tail;
            let vkey = self.nodes[victim].0;
            self.unlink(victim);
            self.map.remove(&vkey);
            self.free.push(victim);
            evicted = Some(vkey);
        }
        let idx = if let Some(idx) = self.free.pop() {
            self.nodes[idx].0 = key;
            idx
        } else {
            self.nodes.push((key, NIL, NIL));
            self.nodes.len() - 1
        };
        self.map.insert(key, idx);
        self.push_front(idx);
        evicted
    }

    /// Remove `key`; returns true when it was present.
    pub fn remove(&mut self, key: u64) -> bool {
        if let Some(idx) = self.map.remove(&key) {
            self.unlink(idx);
            self.free.push(idx);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, key: u64) -> bool {
        self.map.contains_key(&key)
    }
}

/// Outcome of one processing step, for the engine to turn into a
/// completion delivery.
#[derive(Debug, Clone, Copy)]
pub struct ProcessedWr {
    pub wr: WrId,
    /// When the NIC finished processing (it is busy until then).
    pub processed_at: SimTime,
    /// When the transfer is done on the wire and the completion lands.
    pub wire_done_at: SimTime,
}

#[derive(Debug)]
pub struct NicModel {
    pub cfg: NicConfig,
    wqe_cache: LruCache,
    qp_cache: LruCache,
    mpt_cache: LruCache,
    busy_until: SimTime,
    pending: VecDeque<WrId>,
    /// A NicStep event is in flight.
    pub stepping: bool,
    /// Total NIC-side time charged, for the replay oracle.
    pub charged_ns: u64,
}

impl NicModel {
    pub fn new(cfg: NicConfig) -> Self {
        let wqe = LruCache::new(cfg.wqe_cache_slots);
        let qp = LruCache::new(cfg.qp_cache_slots);
        let mpt = LruCache::new(cfg.mpt_cache_slots);
        NicModel {
            cfg,
            wqe_cache: wqe,
            qp_cache: qp,
            mpt_cache: mpt,
            busy_until: SimTime::ZERO,
            pending: VecDeque::new(),
            stepping: false,
            charged_ns: 0,
        }
    }

    fn charge(&mut self, at: SimTime, cost: u64) {
        if at > self.busy_until {
            self.busy_until = at;
        }
        self.busy_until = self.busy_until.add(cost);
        self.charged_ns += cost;
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    pub fn backlog(&self) -> usize {
        self.pending.len()
    }

    /// Ingest a posted chain: one MMIO for the head, a DMA read per chained
    /// WR, cache updates with refetch charges on misses. Returns the time
    /// ingestion finishes.
    pub fn accept_post(
        &mut self,
        at: SimTime,
        chain: &[&WorkRequest],
        counters: &mut Counters,
    ) -> SimTime {
        assert!(!chain.is_empty(), "accept_post: empty chain");
        let n = chain.len() as u64;
        counters.mmio_count += 1;
        counters.dma_read_count += n - 1;
        counters.wqe_posted += n;
        let mut cost = self.cfg.mmio_cost_ns + (n - 1) * self.cfg.dma_read_cost_ns;

        // Connection state lookup, one per doorbell (single-QP chains).
        if !self.qp_cache.touch(chain[0].qp.0 as u64) {
            counters.qp_cache_miss += 1;
            cost += self.cfg.cache_miss_refetch_cost_ns;
            self.qp_cache.insert(chain[0].qp.0 as u64);
        }
        for wr in chain {
            self.wqe_cache.insert(wr.wr_id.0 as u64);
            for sge in &wr.sge_list {
                if !self.mpt_cache.touch(sge.mr_ref.0 as u64) {
                    counters.mpt_cache_miss += 1;
                    cost += self.cfg.cache_miss_refetch_cost_ns;
                    self.mpt_cache.insert(sge.mr_ref.0 as u64);
                }
            }
            self.pending.push_back(wr.wr_id);
        }
        self.charge(at, cost);
        self.busy_until
    }

    /// Register a memory region in the MPT cache (dynamic user-space
    /// registrations and pool slots at init).
    pub fn mpt_register(&mut self, mr: u64) {
        self.mpt_cache.insert(mr);
    }

    /// Process the oldest pending WR. `now` is the firing time of the
    /// nic-step event; actual processing starts once the NIC is free.
    ///
    /// WQE state stays cached until the completion retires it, so cache
    /// pressure tracks all in-flight work, not just the pre-processing
    /// backlog.
    pub fn process_one(
        &mut self,
        now: SimTime,
        wrs: &[WorkRequest],
        counters: &mut Counters,
    ) -> Option<ProcessedWr> {
        let wr_id = self.pending.pop_front()?;
        let wr = &wrs[wr_id.0];
        let mut cost = self.cfg.per_wqe_process_cost_ns;
        // Evicted before processing: refetch over PCIe.
        if !self.wqe_cache.touch(wr_id.0 as u64) {
            counters.wqe_cache_miss += 1;
            cost += self.cfg.cache_miss_refetch_cost_ns;
            self.wqe_cache.insert(wr_id.0 as u64);
        }
        self.charge(now, cost);
        let processed_at = self.busy_until;
        let wire_done_at = processed_at.add(self.cfg.wire_ns(wr.len));
        Some(ProcessedWr { wr: wr_id, processed_at, wire_done_at })
    }

    /// Completion delivered: the WQE leaves the NIC cache.
    pub fn retire_wqe(&mut self, wr: WrId) {
        self.wqe_cache.remove(wr.0 as u64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verbs::{MrId, Opcode, QpId, ReqId, ScatterGatherEntry};

    fn wr(id: usize, qp: usize, len: u64, mr: usize) -> WorkRequest {
        WorkRequest {
            wr_id: WrId(id),
            qp: QpId(qp),
            opcode: Opcode::RdmaWrite,
            sge_list: vec![ScatterGatherEntry { local_addr: 0, len, mr_ref: MrId(mr) }],
            remote_addr: 0,
            covers: vec![ReqId(id as u64)],
            chain_next: None,
            signaled: true,
            len,
            pool_slot: None,
            posted_at: SimTime::ZERO,
        }
    }

    #[test]
    fn lru_evicts_oldest() {
        let mut lru = LruCache::new(2);
        assert_eq!(lru.insert(1), None);
        assert_eq!(lru.insert(2), None);
        assert!(lru.touch(1));
        assert_eq!(lru.insert(3), Some(2));
        assert!(lru.contains(1));
        assert!(!lru.contains(2));
        assert!(lru.remove(3));
        assert!(!lru.remove(3));
    }

    #[test]
    fn single_wr_costs_one_mmio_no_dma() {
        let mut nic = NicModel::new(NicConfig::default());
        let mut c = Counters::default();
        let w = wr(0, 0, 4096, 0);
        nic.accept_post(SimTime::ZERO, &[&w], &mut c);
        assert_eq!(c.mmio_count, 1);
        assert_eq!(c.dma_read_count, 0);
        assert_eq!(c.wqe_posted, 1);
    }

    #[test]
    fn chain_of_eight_costs_one_mmio_seven_dma() {
        let mut nic = NicModel::new(NicConfig::default());
        let mut c = Counters::default();
        let wrs: Vec<WorkRequest> = (0..8).map(|i| wr(i, 0, 4096, 0)).collect();
        let refs: Vec<&WorkRequest> = wrs.iter().collect();
        nic.accept_post(SimTime::ZERO, &refs, &mut c);
        assert_eq!(c.mmio_count, 1);
        assert_eq!(c.dma_read_count, 7);
        assert_eq!(c.wqe_posted, 8);
    }

    #[test]
    fn warm_chain_cost_is_mmio_plus_dma() {
        let cfg = NicConfig::default();
        let mut nic = NicModel::new(cfg.clone());
        let mut c = Counters::default();
        // Warm the QP and MPT caches.
        let w0 = wr(0, 0, 4096, 0);
        nic.accept_post(SimTime::ZERO, &[&w0], &mut c);
        let warm_busy = nic.busy_until();
        let wrs: Vec<WorkRequest> = (1..5).map(|i| wr(i, 0, 4096, 0)).collect();
        let refs: Vec<&WorkRequest> = wrs.iter().collect();
        nic.accept_post(warm_busy, &refs, &mut c);
        let expected = warm_busy.add(cfg.mmio_cost_ns + 3 * cfg.dma_read_cost_ns);
        assert_eq!(nic.busy_until(), expected);
    }

    #[test]
    fn cold_qp_cache_charges_refetch() {
        let cfg = NicConfig::default();
        let mut nic = NicModel::new(cfg.clone());
        let mut c = Counters::default();
        // Warm MPT only.
        nic.mpt_register(0);
        let w = wr(0, 0, 4096, 0);
        nic.accept_post(SimTime::ZERO, &[&w], &mut c);
        assert_eq!(c.qp_cache_miss, 1);
        assert_eq!(
            nic.busy_until(),
            SimTime(cfg.mmio_cost_ns + cfg.cache_miss_refetch_cost_ns)
        );
    }

    #[test]
    fn processing_warm_wr_completes_at_cost_sum() {
        let cfg = NicConfig::default();
        let mut nic = NicModel::new(cfg.clone());
        let mut c = Counters::default();
        let len = 128 * 1024;
        let wrs = vec![wr(0, 0, len, 0)];
        nic.accept_post(SimTime::ZERO, &[&wrs[0]], &mut c);
        let post_done = nic.busy_until();
        let done = nic.process_one(post_done, &wrs, &mut c).unwrap();
        assert_eq!(c.wqe_cache_miss, 0);
        assert_eq!(done.processed_at, post_done.add(cfg.per_wqe_process_cost_ns));
        assert_eq!(done.wire_done_at, done.processed_at.add(cfg.wire_ns(len)));
        // Nothing left.
        assert!(nic.process_one(done.processed_at, &wrs, &mut c).is_none());
    }

    #[test]
    fn backlog_past_wqe_cache_pays_refetch() {
        let mut cfg = NicConfig::default();
        cfg.wqe_cache_slots = 4;
        let mut nic = NicModel::new(cfg);
        let mut c = Counters::default();
        let wrs: Vec<WorkRequest> = (0..8).map(|i| wr(i, 0, 4096, 0)).collect();
        let refs: Vec<&WorkRequest> = wrs.iter().collect();
        nic.accept_post(SimTime::ZERO, &refs, &mut c);
        // Twice the cache's worth in flight and nothing retiring:
        // processing churns the LRU and every WR refetches.
        for _ in 0..8 {
            let t = nic.busy_until();
            nic.process_one(t, &wrs, &mut c).unwrap();
        }
        assert_eq!(c.wqe_cache_miss, 8);
    }

    #[test]
    fn in_flight_within_cache_stays_warm() {
        let mut cfg = NicConfig::default();
        cfg.wqe_cache_slots = 8;
        let mut nic = NicModel::new(cfg);
        let mut c = Counters::default();
        let wrs: Vec<WorkRequest> = (0..8).map(|i| wr(i, 0, 4096, 0)).collect();
        let refs: Vec<&WorkRequest> = wrs.iter().collect();
        nic.accept_post(SimTime::ZERO, &refs, &mut c);
        for _ in 0..8 {
            let t = nic.busy_until();
            let done = nic.process_one(t, &wrs, &mut c).unwrap();
            nic.retire_wqe(done.wr);
        }
        assert_eq!(c.wqe_cache_miss, 0);
    }

    #[test]
    fn mr_cost_crossover_matches_calibration() {
        let m = MrCostModel::default();
        m.validate().unwrap();
        let k256 = 256 * 1024;
        assert!(
            m.mr_cost(AddressSpace::Kernel, MrKind::Dynamic, k256)
                < m.mr_cost(AddressSpace::Kernel, MrKind::PreRegistered, k256)
        );
        assert!(
            m.mr_cost(AddressSpace::User, MrKind::PreRegistered, k256)
                < m.mr_cost(AddressSpace::User, MrKind::Dynamic, k256)
        );
        let big = 2 * 1024 * 1024;
        assert!(
            m.mr_cost(AddressSpace::User, MrKind::Dynamic, big)
                < m.mr_cost(AddressSpace::User, MrKind::PreRegistered, big)
        );
        // Near the threshold the two are within 2%.
        let at = 928 * 1024;
        let pre = m.mr_cost(AddressSpace::User, MrKind::PreRegistered, at) as f64;
        let dyn_ = m.mr_cost(AddressSpace::User, MrKind::Dynamic, at) as f64;
        assert!((pre - dyn_).abs() / pre < 0.02, "pre={pre} dyn={dyn_}");
    }
}
