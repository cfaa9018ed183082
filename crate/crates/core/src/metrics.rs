//! Run metrics: monotone counters, gauges, latency histograms, and the
//! sampled gauge time series that feeds reports.

use serde::{Deserialize, Serialize};

use crate::sim::SimTime;

/// Power-of-two bucketed histogram over nanosecond values. Mean is exact
/// (sum/count); quantiles resolve to a bucket upper bound.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Histogram {
    count: u64,
    sum: u64,
    min: u64,
    max: u64,
    /// buckets[i] counts values v with 2^(i-1) < v <= 2^i (bucket 0: v <= 1).
    buckets: Vec<u64>,
}

const BUCKETS: usize = 42;

impl Histogram {
    pub fn new() -> Self {
        Histogram { count: 0, sum: 0, min: u64::MAX, max: 0, buckets: vec![0; BUCKETS] }
    }

    pub fn record(&mut self, value: u64) {
        self.count += 1;
        self.sum += value;
        self.min = self.min.min(value);
        self.max = self.max.max(value);
        let idx = (64 - value.max(1).leading_zeros() as usize).min(BUCKETS - 1);
        self.buckets[idx] += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    pub fn min(&self) -> u64 {
        if self.count == 0 {
            0
        } else {
            self.min
        }
    }

    pub fn max(&self) -> u64 {
        self.max
    }

    /// Upper bound of the bucket containing quantile `q` in [0, 1].
    pub fn quantile(&self, q: f64) -> u64 {
        if self.count == 0 {
            return 0;
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0;
        for (i, n) in self.buckets.iter().enumerate() {
            seen += n;
            if seen >= rank {
                return 1u64 << i;
            }
        }
        self.max
    }
}

/// One sampled point of the gauge time series.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GaugeSample {
    pub at: SimTime,
    pub in_flight_bytes: u64,
    pub in_flight_ops: u64,
    pub merge_queue_depth: u64,
}

/// Monotone counters shared by every module. Counter semantics only: the
/// registry asserts `requests_completed <= requests_in` on update.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Counters {
    pub requests_in: u64,
    pub requests_completed: u64,
    pub wqe_posted: u64,
    pub mmio_count: u64,
    pub dma_read_count: u64,
    pub interrupts: u64,
    pub context_switches: u64,
    pub wc_polled: u64,
    pub merges: u64,
    pub chains: u64,
    pub wqe_cache_miss: u64,
    pub qp_cache_miss: u64,
    pub mpt_cache_miss: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricsRegistry {
    pub counters: Counters,
    pub in_flight_bytes: u64,
    pub in_flight_ops: u64,
    pub merge_queue_depth: u64,
    pub request_latency: Histogram,
    pub io_completion_time: Histogram,
    /// CPU time burnt by pollers (spin, poll, handle, interrupt entry).
    pub cpu_busy_time: u64,
    pub samples: Vec<GaugeSample>,
    /// Time of the last handled completion; denominator for throughput.
    pub last_handled_at: SimTime,
    pub first_arrival_at: Option<SimTime>,
}

impl MetricsRegistry {
    pub fn new() -> Self {
        MetricsRegistry {
            request_latency: Histogram::new(),
            io_completion_time: Histogram::new(),
            ..Default::default()
        }
    }

    pub fn request_in(&mut self, at: SimTime) {
        self.counters.requests_in += 1;
        if self.first_arrival_at.is_none() {
            self.first_arrival_at = Some(at);
        }
    }

    pub fn requests_completed(&mut self, n: u64, at: SimTime) {
        self.counters.requests_completed += n;
        debug_assert!(
            self.counters.requests_completed <= self.counters.requests_in,
            "completed {} > in {}",
            self.counters.requests_completed,
            self.counters.requests_in
        );
        if at > self.last_handled_at {
            self.last_handled_at = at;
        }
    }

    pub fn sample(&mut self, at: SimTime) {
        self.samples.push(GaugeSample {
            at,
            in_flight_bytes: self.in_flight_bytes,
            in_flight_ops: self.in_flight_ops,
            merge_queue_depth: self.merge_queue_depth,
        });
    }

    /// Delivered request throughput in ops/sec: completions over the span
    /// from first arrival to last handled completion.
    pub fn iops(&self) -> f64 {
        let start = self.first_arrival_at.unwrap_or(SimTime::ZERO);
        let span = self.last_handled_at.saturating_sub(start);
        if span == 0 {
            return 0.0;
        }
        self.counters.requests_completed as f64 * 1e9 / span as f64
    }

    /// Mean of the sampled in-flight byte gauge.
    pub fn mean_in_flight_bytes(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: u128 = self.samples.iter().map(|s| s.in_flight_bytes as u128).sum();
        sum as f64 / self.samples.len() as f64
    }

    pub fn mean_in_flight_ops(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: u128 = self.samples.iter().map(|s| s.in_flight_ops as u128).sum();
        sum as f64 / self.samples.len() as f64
    }

    /// Population variance of the sampled in-flight byte gauge.
    pub fn variance_in_flight_bytes(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let mean = self.mean_in_flight_bytes();
        let ss: f64 =
            self.samples.iter().map(|s| (s.in_flight_bytes as f64 - mean).powi(2)).sum();
        ss / self.samples.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_mean_and_quantiles() {
        let mut h = Histogram::new();
        for v in [100u64, 200, 300, 400] {
            h.record(v);
        }
        assert_eq!(h.count(), 4);
        assert!((h.mean() - 250.0).abs() < f64::EPSILON);
        assert_eq!(h.min(), 100);
        assert_eq!(h.max(), 400);
        // 100 and 200 land in buckets 7 (<=128) and 8 (<=256).
        assert_eq!(h.quantile(0.25), 128);
        assert!(h.quantile(0.99) >= 400);
    }

    #[test]
    fn iops_uses_arrival_to_last_handle_span() {
        let mut m = MetricsRegistry::new();
        m.request_in(SimTime(1_000));
        m.request_in(SimTime(2_000));
        m.requests_completed(2, SimTime(1_001_000));
        // 2 requests over 1ms.
        assert!((m.iops() - 2_000.0).abs() < 1e-9);
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "completed")]
    fn completion_cannot_exceed_arrivals() {
        let mut m = MetricsRegistry::new();
        m.request_in(SimTime::ZERO);
        m.requests_completed(2, SimTime(10));
    }
}
