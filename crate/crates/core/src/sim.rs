//! Deterministic discrete-event kernel: virtual clock, event queue, and
//! seeded randomness.
//!
//! Virtual time is an integer nanosecond counter. Events that fire at the
//! same tick are dispatched in the order they were scheduled (a per-event
//! sequence number breaks ties), so a run is a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

/// Virtual time in nanoseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn micros(us: u64) -> SimTime {
        SimTime(us * 1_000)
    }

    pub fn millis(ms: u64) -> SimTime {
        SimTime(ms * 1_000_000)
    }

    #[must_use]
    pub fn add(self, delta: u64) -> SimTime {
        SimTime(self.0 + delta)
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl std::fmt::Display for SimTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// What a scheduled event does when it fires. Payloads are plain indices
/// into engine-owned tables; events never hold references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    /// A workload request reaches its issue time on an actor.
    PostArrival { actor: usize },
    /// The NIC processing engine finishes its current work request.
    NicStep,
    /// A work completion lands in a completion queue.
    CompletionDelivery { cq: usize, wc: usize },
    /// Interrupt entry into a poller after an armed CQ received a WC.
    Interrupt { poller: usize },
    /// A parked or staged actor/poller continues at this time.
    ActorWakeup { actor: usize },
    /// Poller continues its poll/handle loop. `gen` invalidates stale
    /// steps after a parked poller is woken early by a delivery.
    PollerStep { poller: usize, gen: u64 },
    /// Gauge time-series sampling tick.
    SampleTick,
}

#[derive(Debug)]
pub struct SimEvent {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Event queue plus virtual clock. The clock only advances inside
/// [`EventQueue::pop_due`].
#[derive(Debug, Default)]
pub struct EventQueue {
    clock: SimTime,
    next_seq: u64,
    heap: BinaryHeap<SimEvent>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    /// Schedule `kind` at absolute time `fire_at`.
    ///
    /// Scheduling into the past is a contract violation and aborts the run.
    pub fn schedule(&mut self, fire_at: SimTime, kind: EventKind) {
        assert!(
            fire_at >= self.clock,
            "event scheduled into the past: fire_at={} clock={} kind={:?}",
            fire_at,
            self.clock,
            kind
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent { fire_at, seq, kind });
    }

    pub fn schedule_in(&mut self, delta: u64, kind: EventKind) {
        self.schedule(self.clock.add(delta), kind);
    }

    /// Pop the next event with `fire_at <= deadline`, advancing the clock to
    /// its fire time. Returns `None` when nothing is due.
    pub fn pop_due(&mut self, deadline: SimTime) -> Option<SimEvent> {
        match self.heap.peek() {
            Some(ev) if ev.fire_at <= deadline => {
                let ev = self.heap.pop().unwrap();
                debug_assert!(ev.fire_at >= self.clock, "clock would move backwards");
                self.clock = ev.fire_at;
                Some(ev)
            }
            _ => None,
        }
    }
}

/// Multiplier applied to CPU-side costs when runnable contexts oversubscribe
/// the host's poller-capable virtual CPUs. Kept as a rational so scaling is
/// exact integer arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct CpuScale {
    num: u64,
    den: u64,
}

impl CpuScale {
    /// `contexts` runnable contexts sharing `cpus` CPUs; below full
    /// subscription the scale is 1.
    pub fn new(contexts: u64, cpus: u64) -> CpuScale {
        assert!(cpus > 0, "cpu budget must be positive");
        if contexts <= cpus {
            CpuScale { num: 1, den: 1 }
        } else {
            CpuScale { num: contexts, den: cpus }
        }
    }

    pub fn identity() -> CpuScale {
        CpuScale { num: 1, den: 1 }
    }

    pub fn apply(&self, cost: u64) -> u64 {
        ((cost as u128 * self.num as u128) / self.den as u128) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_tick_dispatch_order_follows_schedule_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(100), EventKind::NicStep);
        q.schedule(SimTime(100), EventKind::SampleTick);
        q.schedule(SimTime(50), EventKind::SampleTick);

        let e1 = q.pop_due(SimTime::MAX).unwrap();
        assert_eq!(e1.fire_at, SimTime(50));
        let e2 = q.pop_due(SimTime::MAX).unwrap();
        assert_eq!((e2.fire_at, &e2.kind), (SimTime(100), &EventKind::NicStep));
        let e3 = q.pop_due(SimTime::MAX).unwrap();
        assert_eq!((e3.fire_at, &e3.kind), (SimTime(100), &EventKind::SampleTick));
        assert!(q.pop_due(SimTime::MAX).is_none());
    }

    #[test]
    fn schedule_at_current_tick_runs_before_later_events() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), EventKind::NicStep);
        let _ = q.pop_due(SimTime::MAX).unwrap();
        // Clock is now 10; an event at t=10 must dispatch before one at t=11.
        q.schedule(SimTime(11), EventKind::NicStep);
        q.schedule(SimTime(10), EventKind::SampleTick);
        let next = q.pop_due(SimTime::MAX).unwrap();
        assert_eq!(next.fire_at, SimTime(10));
        assert_eq!(next.kind, EventKind::SampleTick);
    }

    #[test]
    #[should_panic(expected = "scheduled into the past")]
    fn scheduling_into_the_past_aborts() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(60), EventKind::NicStep);
        let _ = q.pop_due(SimTime::MAX);
        q.schedule(SimTime(50), EventKind::NicStep);
    }

    #[test]
    fn pop_due_respects_deadline() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(1000), EventKind::NicStep);
        assert!(q.pop_due(SimTime(999)).is_none());
        assert_eq!(q.now(), SimTime::ZERO);
        assert!(q.pop_due(SimTime(1000)).is_some());
        assert_eq!(q.now(), SimTime(1000));
    }

    #[test]
    fn cpu_scale_is_exact() {
        let s = CpuScale::new(17, 8);
        assert_eq!(s.apply(800), 1700);
        let s = CpuScale::new(4, 8);
        assert_eq!(s.apply(800), 800);
    }
}
