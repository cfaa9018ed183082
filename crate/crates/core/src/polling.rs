//! Completion-handling strategies: event-triggered, busy polling, event
//! batch, hybrid, shared-CQ busy polling, and adaptive polling with a
//! bounded empty-poll retry hook.
//!
//! A strategy is a per-CQ state machine driven by the engine. Interrupt
//! entry is the only way an armed strategy starts running; busy pollers
//! never arm and instead spin (modeled as a parked wait that accrues CPU
//! time).

use serde::{Deserialize, Serialize};

use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum PollingStrategy {
    EventTriggered,
    Busy,
    EventBatch {
        budget: usize,
    },
    Hybrid,
    SharedCq {
        m: usize,
    },
    Adaptive {
        max_poll_wc: usize,
        max_retry: u32,
        /// Reset the retry counter after a non-empty batch. The literal
        /// pseudocode never resets, which makes a loaded poller exit
        /// eventually; persistence matches the stay-busy intent, so the
        /// reset defaults on.
        #[serde(default = "default_true")]
        reset_retry_on_success: bool,
    },
}

fn default_true() -> bool {
    true
}

pub const DEFAULT_MAX_POLL_WC: usize = 16;
pub const DEFAULT_MAX_RETRY: u32 = 120;

impl PollingStrategy {
    pub fn adaptive_default() -> Self {
        PollingStrategy::Adaptive {
            max_poll_wc: DEFAULT_MAX_POLL_WC,
            max_retry: DEFAULT_MAX_RETRY,
            reset_retry_on_success: true,
        }
    }

    /// Dedicated spinning pollers this strategy pins to CPUs.
    pub fn spinner_count(&self, cq_count: usize) -> usize {
        match self {
            PollingStrategy::Busy => cq_count,
            PollingStrategy::SharedCq { m } => *m,
            _ => 0,
        }
    }

    /// Strategies that never arm completion notification.
    pub fn is_spinner(&self) -> bool {
        matches!(self, PollingStrategy::Busy | PollingStrategy::SharedCq { .. })
    }

    /// Completions taken per poll call.
    pub fn poll_batch(&self) -> usize {
        match self {
            PollingStrategy::EventTriggered => 1,
            PollingStrategy::EventBatch { budget } => *budget,
            // Drains until empty; batch size is unbounded.
            PollingStrategy::Hybrid => usize::MAX,
            PollingStrategy::Adaptive { max_poll_wc, .. } => *max_poll_wc,
            PollingStrategy::Busy | PollingStrategy::SharedCq { .. } => DEFAULT_MAX_POLL_WC,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            PollingStrategy::EventBatch { budget } if *budget < 1 => {
                Err("polling budget must be >= 1".into())
            }
            PollingStrategy::SharedCq { m } if *m < 1 => Err("shared CQ count must be >= 1".into()),
            PollingStrategy::Adaptive { max_poll_wc, .. } if *max_poll_wc < 1 => {
                Err("max_poll_wc must be >= 1".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollerMode {
    /// Notification armed, not running.
    ArmedIdle,
    /// Inside the poll/handle loop.
    Polling,
    /// Spinning on an empty CQ (busy poller park or adaptive retry window).
    Spinning,
}

/// Per-poller live state. One poller drives one CQ (or one shared CQ).
#[derive(Debug)]
pub struct PollerState {
    pub cq: usize,
    pub mode: PollerMode,
    pub retry: u32,
    /// Invalidates stale scheduled steps after an early wake.
    pub gen: u64,
    /// Completions handled in the current entry.
    pub entry_wcs: u64,
    /// Per-entry handled counts, the trace checked by limit-equivalence.
    pub entries: Vec<u64>,
    pub cpu_busy_ns: u64,
    pub park_started: Option<SimTime>,
    /// Absolute time the adaptive retry window expires.
    pub window_deadline: Option<SimTime>,
    /// Completions polled and awaiting their handle step.
    pub backlog: std::collections::VecDeque<usize>,
    pub interrupts_taken: u64,
}

impl PollerState {
    pub fn new(cq: usize) -> Self {
        PollerState {
            cq,
            mode: PollerMode::ArmedIdle,
            retry: 0,
            gen: 0,
            entry_wcs: 0,
            entries: Vec::new(),
            cpu_busy_ns: 0,
            park_started: None,
            window_deadline: None,
            backlog: std::collections::VecDeque::new(),
            interrupts_taken: 0,
        }
    }

    pub fn bump_gen(&mut self) -> u64 {
        self.gen += 1;
        self.gen
    }

    pub fn finish_entry(&mut self) {
        self.entries.push(self.entry_wcs);
        self.entry_wcs = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spinner_counts() {
        assert_eq!(PollingStrategy::Busy.spinner_count(16), 16);
        assert_eq!(PollingStrategy::SharedCq { m: 2 }.spinner_count(16), 2);
        assert_eq!(PollingStrategy::adaptive_default().spinner_count(16), 0);
        assert_eq!(PollingStrategy::EventTriggered.spinner_count(16), 0);
    }

    #[test]
    fn poll_batch_per_strategy() {
        assert_eq!(PollingStrategy::EventTriggered.poll_batch(), 1);
        assert_eq!(PollingStrategy::EventBatch { budget: 8 }.poll_batch(), 8);
        assert_eq!(PollingStrategy::Hybrid.poll_batch(), usize::MAX);
    }
}
