//! Window-based in-flight byte limiter enforced at the merge queue, plus
//! the customization hook.
//!
//! One regulator is shared by reads and writes. Accounting runs at
//! fragment granularity (block size by default, page size by config), and
//! runs whether or not the window is enabled so the in-flight gauge is
//! always available for window calibration.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

/// Hook invoked on every completion with (in_flight_bytes, window_bytes,
/// completion latency); may return a replacement window.
pub type AdmissionHook = Box<dyn FnMut(u64, u64, u64) -> Option<u64> + Send>;

#[derive(Debug, Clone, Copy)]
pub struct WaitingActor {
    pub actor: usize,
    pub need: u64,
}

/// Event-kernel variant: blocking is modeled by parking the calling actor
/// in the FIFO waiter list; the engine wakes whatever `on_completion`
/// admits.
pub struct TrafficRegulator {
    window_bytes: u64,
    fragment_bytes: u64,
    in_flight_bytes: u64,
    waiters: VecDeque<WaitingActor>,
    hook: Option<AdmissionHook>,
}

impl std::fmt::Debug for TrafficRegulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrafficRegulator")
            .field("window_bytes", &self.window_bytes)
            .field("fragment_bytes", &self.fragment_bytes)
            .field("in_flight_bytes", &self.in_flight_bytes)
            .field("waiters", &self.waiters.len())
            .field("hook", &self.hook.is_some())
            .finish()
    }
}

impl TrafficRegulator {
    /// `window_bytes == 0` disables blocking (accounting still runs).
    pub fn new(window_bytes: u64, fragment_bytes: u64) -> Self {
        assert!(fragment_bytes > 0, "fragment_bytes must be positive");
        TrafficRegulator {
            window_bytes,
            fragment_bytes,
            in_flight_bytes: 0,
            waiters: VecDeque::new(),
            hook: None,
        }
    }

    pub fn enabled(&self) -> bool {
        self.window_bytes > 0
    }

    pub fn window_bytes(&self) -> u64 {
        self.window_bytes
    }

    pub fn in_flight_bytes(&self) -> u64 {
        self.in_flight_bytes
    }

    pub fn set_hook(&mut self, hook: AdmissionHook) {
        self.hook = Some(hook);
    }

    /// Round `need` up to fragment granularity.
    pub fn round_up(&self, need: u64) -> u64 {
        assert!(need > 0, "admission need must be positive");
        need.div_ceil(self.fragment_bytes) * self.fragment_bytes
    }

    /// Try to reserve `need` (already rounded). Never blocks the caller;
    /// a false return means the actor must park. Reservations are refused
    /// while earlier waiters queue, keeping FIFO order.
    pub fn try_admit(&mut self, need: u64) -> bool {
        debug_assert_eq!(need % self.fragment_bytes, 0);
        if self.enabled()
            && (!self.waiters.is_empty() || self.in_flight_bytes + need > self.window_bytes)
        {
            return false;
        }
        self.in_flight_bytes += need;
        true
    }

    /// Park an actor that failed to admit.
    pub fn enqueue_waiter(&mut self, actor: usize, need: u64) {
        self.waiters.push_back(WaitingActor { actor, need });
    }

    /// Release `freed` bytes (already rounded) and admit now-eligible
    /// waiters in FIFO order; their reservations are charged here so a
    /// later waiter cannot overtake. Returns the actors to wake.
    pub fn on_completion(&mut self, freed: u64, latency_sample: u64) -> Vec<usize> {
        assert!(freed <= self.in_flight_bytes, "admission underflow: freeing {freed}");
        self.in_flight_bytes -= freed;
        if let Some(hook) = &mut self.hook {
            if let Some(new_window) = hook(self.in_flight_bytes, self.window_bytes, latency_sample)
            {
                assert!(
                    new_window >= self.fragment_bytes,
                    "hook returned window below fragment size"
                );
                self.window_bytes = new_window;
            }
        }
        let mut woken = Vec::new();
        while let Some(front) = self.waiters.front() {
            if self.in_flight_bytes + front.need > self.window_bytes {
                break;
            }
            let w = self.waiters.pop_front().unwrap();
            self.in_flight_bytes += w.need;
            woken.push(w.actor);
        }
        woken
    }

    /// Return an unused reservation: decrement and wake eligible waiters,
    /// without invoking the admission hook (no completion happened).
    pub fn release_unused(&mut self, unused: u64) -> Vec<usize> {
        assert!(unused <= self.in_flight_bytes, "admission underflow: releasing {unused}");
        self.in_flight_bytes -= unused;
        let mut woken = Vec::new();
        while let Some(front) = self.waiters.front() {
            if self.in_flight_bytes + front.need > self.window_bytes {
                break;
            }
            let w = self.waiters.pop_front().unwrap();
            self.in_flight_bytes += w.need;
            woken.push(w.actor);
        }
        woken
    }

    /// Window-bound invariant, checked at event boundaries by the engine.
    pub fn check_bound(&self) {
        if self.enabled() {
            assert!(
                self.in_flight_bytes <= self.window_bytes,
                "window bound violated: {} > {}",
                self.in_flight_bytes,
                self.window_bytes
            );
        }
    }
}

#[derive(Debug)]
struct SyncState {
    in_flight: u64,
    window: u64,
    /// Ticket FIFO: head may admit when it fits.
    queue: VecDeque<u64>,
    next_ticket: u64,
    peak: u64,
}

/// Thread-safe regulator for the concurrent stress mode. Strict FIFO via
/// tickets; `acquire` blocks real threads.
#[derive(Debug)]
pub struct SyncRegulator {
    state: Mutex<SyncState>,
    cond: Condvar,
    fragment: u64,
}

impl SyncRegulator {
    pub fn new(window_bytes: u64, fragment_bytes: u64) -> Self {
        assert!(fragment_bytes > 0);
        SyncRegulator {
            state: Mutex::new(SyncState {
                in_flight: 0,
                window: window_bytes,
                queue: VecDeque::new(),
                next_ticket: 0,
                peak: 0,
            }),
            cond: Condvar::new(),
            fragment: fragment_bytes,
        }
    }

    pub fn acquire(&self, need: u64) {
        let need = need.div_ceil(self.fragment) * self.fragment;
        let mut st = self.state.lock().unwrap();
        if st.window == 0 {
            st.in_flight += need;
            st.peak = st.peak.max(st.in_flight);
            return;
        }
        assert!(need <= st.window, "need {} exceeds window {}", need, st.window);
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        st.queue.push_back(ticket);
        while st.queue.front() != Some(&ticket) || st.in_flight + need > st.window {
            st = self.cond.wait(st).unwrap();
        }
        st.queue.pop_front();
        st.in_flight += need;
        st.peak = st.peak.max(st.in_flight);
        assert!(st.in_flight <= st.window, "window bound violated under concurrency");
        // Another waiter may also fit now.
        self.cond.notify_all();
    }

    pub fn release(&self, freed: u64) {
        let freed = freed.div_ceil(self.fragment) * self.fragment;
        let mut st = self.state.lock().unwrap();
        assert!(freed <= st.in_flight, "sync admission underflow");
        st.in_flight -= freed;
        self.cond.notify_all();
    }

    pub fn in_flight(&self) -> u64 {
        self.state.lock().unwrap().in_flight
    }

    pub fn peak(&self) -> u64 {
        self.state.lock().unwrap().peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1024 * 1024;

    #[test]
    fn blocks_until_enough_freed() {
        // 7 MiB window, 6.5 MiB in flight, 1 MiB need.
        let mut r = TrafficRegulator::new(7 * MIB, MIB / 4);
        assert!(r.try_admit(r.round_up(6 * MIB + MIB / 2)));
        let need = r.round_up(MIB);
        assert!(!r.try_admit(need));
        r.enqueue_waiter(7, need);
        // Freeing 0.25 MiB is not enough: 6.25 + 1 > 7.
        assert!(r.on_completion(MIB / 4, 0).is_empty());
        // Another 0.25 MiB free reaches the bound: 6.0 + 1.0 <= 7.0.
        let woken = r.on_completion(MIB / 4, 0);
        assert_eq!(woken, vec![7]);
        assert_eq!(r.in_flight_bytes(), 7 * MIB);
        r.check_bound();
    }

    #[test]
    fn disabled_never_blocks_but_accounts() {
        let mut r = TrafficRegulator::new(0, 128 * 1024);
        for _ in 0..100 {
            assert!(r.try_admit(r.round_up(MIB)));
        }
        assert_eq!(r.in_flight_bytes(), 100 * MIB);
        assert!(r.on_completion(100 * MIB, 0).is_empty());
        assert_eq!(r.in_flight_bytes(), 0);
    }

    #[test]
    fn waiters_released_fifo() {
        let mut r = TrafficRegulator::new(2 * MIB, 128 * 1024);
        assert!(r.try_admit(r.round_up(2 * MIB)));
        let need = r.round_up(MIB);
        assert!(!r.try_admit(need));
        r.enqueue_waiter(1, need);
        assert!(!r.try_admit(need));
        r.enqueue_waiter(2, need);
        // Two MiB freed at once: both waiters admitted, FIFO order.
        let woken = r.on_completion(2 * MIB, 0);
        assert_eq!(woken, vec![1, 2]);
        r.check_bound();
    }

    #[test]
    fn later_small_request_cannot_overtake_waiter() {
        let mut r = TrafficRegulator::new(MIB, 128 * 1024);
        assert!(r.try_admit(r.round_up(MIB)));
        r.enqueue_waiter(1, r.round_up(MIB));
        // Head waiter queued: even a small request must queue behind it.
        assert!(!r.try_admit(r.round_up(128 * 1024)));
    }

    #[test]
    fn hook_can_resize_window() {
        let mut r = TrafficRegulator::new(4 * MIB, 128 * 1024);
        r.set_hook(Box::new(|_inflight, _window, _lat| Some(8 * MIB)));
        assert!(r.try_admit(r.round_up(4 * MIB)));
        let _ = r.on_completion(r.round_up(MIB), 500);
        assert_eq!(r.window_bytes(), 8 * MIB);
        // 3 MiB in flight, 8 MiB window: a 5 MiB admit now fits.
        assert!(r.try_admit(r.round_up(5 * MIB)));
    }

    #[test]
    fn freeing_all_returns_gauge_to_zero() {
        let mut r = TrafficRegulator::new(4 * MIB, 128 * 1024);
        assert!(r.try_admit(r.round_up(3 * MIB)));
        let _ = r.on_completion(3 * MIB, 0);
        assert_eq!(r.in_flight_bytes(), 0);
    }
}
