//! Scenario runner and report emitter: loads and validates configs,
//! composes the engine, sweeps parameters, calibrates the admission
//! window, and writes machine-readable reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{BatchMode, BatchPolicy, MrStrategy, DEFAULT_MR_THRESHOLD};
use crate::engine::{CpuCosts, Engine, EngineConfig, EngineResult};
use crate::metrics::{Counters, GaugeSample};
use crate::nic::{MrCostModel, NicConfig};
use crate::polling::PollingStrategy;
use crate::verbs::AddressSpace;
use crate::workload::{gen_burst, gen_kv, load_trace_file, BurstSpec, MixSpec, TraceRecord};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config validation failed: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("trace error: {0}")]
    Trace(#[from] crate::workload::TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingConfig {
    pub mode: BatchMode,
    pub max_chaining_size: usize,
    pub max_merged_bytes: u64,
    pub mr_strategy: MrStrategy,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig {
            mode: BatchMode::Hybrid,
            max_chaining_size: 16,
            max_merged_bytes: 1024 * 1024,
            mr_strategy: MrStrategy::AutoThreshold(DEFAULT_MR_THRESHOLD),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmissionConfig {
    /// 0 disables blocking; the in-flight gauge still runs.
    pub window_bytes: u64,
    /// 0 means block-size granularity.
    pub fragment_bytes: u64,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        AdmissionConfig { window_bytes: 0, fragment_bytes: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadConfig {
    Burst(BurstSpec),
    Kv(MixSpec),
    Trace { path: String },
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig::Burst(BurstSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub actors: usize,
    pub peers: usize,
    pub qps_per_node: usize,
    pub space: AddressSpace,
    pub block_bytes: u64,
    /// Max outstanding requests per actor; 0 = unbounded.
    pub pipeline_depth: usize,
    pub send_queue_depth: usize,
    pub pool_slots: usize,
    pub pool_slot_bytes: u64,
    pub merge_queue_capacity: usize,
    pub sample_every_us: u64,
    pub max_sim_ms: u64,
    pub nic: NicConfig,
    pub mr_cost: MrCostModel,
    pub cpu: CpuCosts,
    pub batching: BatchingConfig,
    pub admission: AdmissionConfig,
    pub polling: PollingStrategy,
    pub workload: WorkloadConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 42,
            actors: 4,
            peers: 1,
            qps_per_node: 1,
            space: AddressSpace::Kernel,
            block_bytes: 128 * 1024,
            pipeline_depth: 48,
            send_queue_depth: 4096,
            pool_slots: 4096,
            pool_slot_bytes: 128 * 1024,
            merge_queue_capacity: 1 << 16,
            sample_every_us: 100,
            max_sim_ms: 600_000,
            nic: NicConfig::default(),
            mr_cost: MrCostModel::default(),
            cpu: CpuCosts::default(),
            batching: BatchingConfig::default(),
            admission: AdmissionConfig::default(),
            polling: PollingStrategy::adaptive_default(),
            workload: WorkloadConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn fragment_bytes(&self) -> u64 {
        if self.admission.fragment_bytes > 0 {
            self.admission.fragment_bytes
        } else {
            self.block_bytes
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.actors < 1 {
            return err("actors must be >= 1".into());
        }
        if self.peers < 1 || self.peers > u16::MAX as usize {
            return err("peers must be in [1, 65535]".into());
        }
        if self.qps_per_node < 1 {
            return err("qps_per_node must be >= 1".into());
        }
        if self.block_bytes == 0 {
            return err("block_bytes must be positive".into());
        }
        if self.send_queue_depth < 1 {
            return err("send_queue_depth must be >= 1".into());
        }
        if self.pool_slots < 1 || self.pool_slot_bytes == 0 {
            return err("pool_slots and pool_slot_bytes must be positive".into());
        }
        self.nic.validate().map_err(|m| ConfigError::Invalid(format!("nic: {m}")))?;
        self.mr_cost.validate().map_err(|m| ConfigError::Invalid(format!("mr_cost: {m}")))?;
        self.cpu.validate().map_err(ConfigError::Invalid)?;
        let policy = BatchPolicy {
            max_chaining_size: self.batching.max_chaining_size,
            mr_strategy: self.batching.mr_strategy,
            max_merged_bytes: self.batching.max_merged_bytes,
        };
        policy.validate().map_err(|m| ConfigError::Invalid(format!("batching: {m}")))?;
        self.polling.validate().map_err(|m| ConfigError::Invalid(format!("polling: {m}")))?;
        let req_len = match &self.workload {
            WorkloadConfig::Burst(b) => {
                b.validate().map_err(|m| ConfigError::Invalid(format!("workload: {m}")))?;
                b.req_len
            }
            WorkloadConfig::Kv(m) => {
                m.validate().map_err(|e| ConfigError::Invalid(format!("workload: {e}")))?;
                m.req_len
            }
            WorkloadConfig::Trace { .. } => self.block_bytes,
        };
        let frag = self.fragment_bytes();
        let need = req_len.div_ceil(frag) * frag;
        if self.admission.window_bytes > 0 && need > self.admission.window_bytes {
            return err(format!(
                "admission.window_bytes ({}) smaller than one admitted request ({need})",
                self.admission.window_bytes
            ));
        }
        if need > self.batching.max_chaining_size as u64 * frag {
            return err(format!(
                "one request needs {need} bytes but a batch reservation holds at most \
                 max_chaining_size x fragment = {}",
                self.batching.max_chaining_size as u64 * frag
            ));
        }
        Ok(())
    }

    /// Materialize the request trace for this scenario.
    pub fn build_trace(&self) -> Result<Vec<TraceRecord>, ConfigError> {
        let trace = match &self.workload {
            WorkloadConfig::Burst(spec) => gen_burst(spec, self.actors, self.peers),
            WorkloadConfig::Kv(mix) => {
                gen_kv(mix, mix.total_requests, self.actors, self.peers, self.seed)
            }
            WorkloadConfig::Trace { path } => load_trace_file(Path::new(path))?,
        };
        for (i, r) in trace.iter().enumerate() {
            if r.origin_actor >= self.actors {
                return Err(ConfigError::Invalid(format!(
                    "trace record {i} names actor {} but scenario has {}",
                    r.origin_actor, self.actors
                )));
            }
            if (r.node as usize) >= self.peers {
                return Err(ConfigError::Invalid(format!(
                    "trace record {i} names node {} but scenario has {} peers",
                    r.node, self.peers
                )));
            }
        }
        Ok(trace)
    }

    pub fn engine_config(&self) -> EngineConfig {
        let (closed_loop, cluster_size, inter_gap) = match &self.workload {
            WorkloadConfig::Burst(b) => (b.closed_loop, b.cluster_size, b.inter_burst_gap_ns),
            _ => (false, 1, 0),
        };
        EngineConfig {
            nic: self.nic.clone(),
            mr_cost: self.mr_cost.clone(),
            cpu: self.cpu,
            policy: BatchPolicy {
                max_chaining_size: self.batching.max_chaining_size,
                mr_strategy: self.batching.mr_strategy,
                max_merged_bytes: self.batching.max_merged_bytes,
            },
            mode: self.batching.mode,
            strategy: self.polling,
            space: self.space,
            window_bytes: self.admission.window_bytes,
            fragment_bytes: self.fragment_bytes(),
            peers: self.peers,
            qps_per_node: self.qps_per_node,
            send_queue_depth: self.send_queue_depth,
            pool_slots: self.pool_slots,
            slot_len: self.pool_slot_bytes,
            pipeline_depth: self.pipeline_depth,
            merge_queue_capacity: self.merge_queue_capacity,
            sample_every_ns: self.sample_every_us * 1_000,
            max_sim_ns: self.max_sim_ms * 1_000_000,
            closed_loop,
            cluster_size,
            inter_burst_gap_ns: inter_gap,
            actors: self.actors,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

impl LatencySummary {
    fn from_histogram(h: &crate::metrics::Histogram) -> Self {
        LatencySummary {
            count: h.count(),
            mean_ns: h.mean(),
            p50_ns: h.quantile(0.50),
            p99_ns: h.quantile(0.99),
            max_ns: h.max(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: ScenarioConfig,
    pub counters: Counters,
    pub iops: f64,
    pub bandwidth_bytes_per_sec: f64,
    pub makespan_ns: u64,
    pub final_clock_ns: u64,
    pub request_latency: LatencySummary,
    pub io_completion_time: LatencySummary,
    pub cpu_busy_ns: u64,
    pub mean_in_flight_bytes: f64,
    pub mean_in_flight_ops: f64,
    pub variance_in_flight_bytes: f64,
    pub quiesced: bool,
    pub violations: Vec<String>,
    pub samples: Vec<GaugeSample>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// One-line human summary.
    pub fn summary_line(&self) -> String {
        format!(
            "iops={:.0} bw={:.1}MB/s wqe={} mmio={} dma={} merges={} chains={} irq={} ctx={} \
             p99={}us cpu={}ms inflight~{:.0}",
            self.iops,
            self.bandwidth_bytes_per_sec / 1e6,
            self.counters.wqe_posted,
            self.counters.mmio_count,
            self.counters.dma_read_count,
            self.counters.merges,
            self.counters.chains,
            self.counters.interrupts,
            self.counters.context_switches,
            self.request_latency.p99_ns / 1_000,
            self.cpu_busy_ns / 1_000_000,
            self.mean_in_flight_bytes,
        )
    }
}

fn make_report(config: &ScenarioConfig, trace_bytes: u64, result: &EngineResult) -> RunReport {
    let m = &result.metrics;
    let start = m.first_arrival_at.unwrap_or(crate::sim::SimTime::ZERO);
    let makespan = m.last_handled_at.saturating_sub(start);
    let bandwidth = if makespan > 0 {
        trace_bytes as f64 * 1e9 / makespan as f64
    } else {
        0.0
    };
    RunReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        counters: m.counters.clone(),
        iops: m.iops(),
        bandwidth_bytes_per_sec: bandwidth,
        makespan_ns: makespan,
        final_clock_ns: result.final_clock.nanos(),
        request_latency: LatencySummary::from_histogram(&m.request_latency),
        io_completion_time: LatencySummary::from_histogram(&m.io_completion_time),
        cpu_busy_ns: m.cpu_busy_time,
        mean_in_flight_bytes: m.mean_in_flight_bytes(),
        mean_in_flight_ops: m.mean_in_flight_ops(),
        variance_in_flight_bytes: m.variance_in_flight_bytes(),
        quiesced: !result.truncated && result.violations.is_empty(),
        violations: result.violations.clone(),
        samples: m.samples.clone(),
    }
}

/// Run a scenario end to end, returning the report and the raw engine
/// result (logs and traces for oracles).
pub fn run_full(config: &ScenarioConfig) -> Result<(RunReport, EngineResult), ConfigError> {
    config.validate()?;
    let trace = config.build_trace()?;
    let trace_bytes: u64 = trace.iter().map(|r| r.len).sum();
    let engine = Engine::new(config.engine_config(), trace);
    let result = engine.run();
    let report = make_report(config, trace_bytes, &result);
    Ok((report, result))
}

pub fn run(config: &ScenarioConfig) -> Result<RunReport, ConfigError> {
    run_full(config).map(|(r, _)| r)
}

/// Set a sweep axis on a config. Axis names mirror the config fields.
pub fn set_axis(config: &mut ScenarioConfig, axis: &str, value: &str) -> Result<(), ConfigError> {
    let parse_u64 = |v: &str| {
        v.parse::<u64>().map_err(|e| ConfigError::Invalid(format!("axis value {v:?}: {e}")))
    };
    match axis {
        "actors" => config.actors = parse_u64(value)? as usize,
        "peers" => config.peers = parse_u64(value)? as usize,
        "qps_per_node" => config.qps_per_node = parse_u64(value)? as usize,
        "pipeline_depth" => config.pipeline_depth = parse_u64(value)? as usize,
        "window_bytes" => config.admission.window_bytes = parse_u64(value)?,
        "seed" => config.seed = parse_u64(value)?,
        "max_chaining_size" => config.batching.max_chaining_size = parse_u64(value)? as usize,
        "cluster_size" => match &mut config.workload {
            WorkloadConfig::Burst(b) => b.cluster_size = parse_u64(value)? as usize,
            _ => {
                return Err(ConfigError::Invalid(
                    "cluster_size axis needs a burst workload".into(),
                ))
            }
        },
        "total_requests" => match &mut config.workload {
            WorkloadConfig::Burst(b) => b.total_requests = parse_u64(value)? as usize,
            WorkloadConfig::Kv(m) => m.total_requests = parse_u64(value)? as usize,
            _ => {
                return Err(ConfigError::Invalid(
                    "total_requests axis needs a generated workload".into(),
                ))
            }
        },
        "max_retry" => match &mut config.polling {
            PollingStrategy::Adaptive { max_retry, .. } => *max_retry = parse_u64(value)? as u32,
            _ => {
                return Err(ConfigError::Invalid("max_retry axis needs adaptive polling".into()))
            }
        },
        "mode" => {
            config.batching.mode = match value {
                "single" => BatchMode::Single,
                "merge" => BatchMode::Merge,
                "doorbell" => BatchMode::Doorbell,
                "hybrid" => BatchMode::Hybrid,
                other => {
                    return Err(ConfigError::Invalid(format!("unknown batching mode {other:?}")))
                }
            }
        }
        "strategy" => {
            config.polling = match value {
                "event_triggered" => PollingStrategy::EventTriggered,
                "busy" => PollingStrategy::Busy,
                "event_batch" => PollingStrategy::EventBatch { budget: 16 },
                "hybrid" => PollingStrategy::Hybrid,
                "shared_cq" => PollingStrategy::SharedCq { m: 1 },
                "adaptive" => PollingStrategy::adaptive_default(),
                other => {
                    return Err(ConfigError::Invalid(format!("unknown strategy {other:?}")))
                }
            }
        }
        other => return Err(ConfigError::Invalid(format!("invalid sweep axis {other:?}"))),
    }
    Ok(())
}

/// Run one scenario per axis value. Scenarios are independent, so they run
/// on separate host threads; reports come back in axis order.
pub fn sweep(
    base: &ScenarioConfig,
    axis: &str,
    values: &[String],
) -> Result<Vec<RunReport>, ConfigError> {
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = base.clone();
        set_axis(&mut c, axis, v)?;
        c.validate()?;
        configs.push(c);
    }
    let mut out: Vec<Option<Result<RunReport, ConfigError>>> =
        (0..configs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for c in &configs {
            handles.push(scope.spawn(move || run(c)));
        }
        for (i, h) in handles.into_iter().enumerate() {
            out[i] = Some(h.join().expect("sweep worker panicked"));
        }
    });
    out.into_iter().map(|r| r.unwrap()).collect()
}

/// Text table over sweep reports.
pub fn sweep_table(axis: &str, values: &[String], reports: &[RunReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:>12} {:>12} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>12} {:>12}\n",
        axis, "iops", "wqe", "mmio", "dma", "merges", "irq", "ctx", "p99_us", "cpu_ms"
    ));
    for (v, r) in values.iter().zip(reports) {
        s.push_str(&format!(
            "{:>12} {:>12.0} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>12} {:>12}\n",
            v,
            r.iops,
            r.counters.wqe_posted,
            r.counters.mmio_count,
            r.counters.dma_read_count,
            r.counters.merges,
            r.counters.interrupts,
            r.counters.context_switches,
            r.request_latency.p99_ns / 1_000,
            r.cpu_busy_ns / 1_000_000,
        ));
    }
    s
}

#[derive(Debug)]
pub struct WindowCalibration {
    pub window_bytes: u64,
    pub peak_actors: usize,
    pub warning: Option<String>,
    pub reports: Vec<RunReport>,
}

/// Two-pass window calibration: sweep the actor count with the regulator
/// off, find the IOPS peak, and return the mean in-flight bytes there.
pub fn calibrate_window(config: &ScenarioConfig) -> Result<WindowCalibration, ConfigError> {
    if config.admission.window_bytes != 0 {
        return Err(ConfigError::Invalid(
            "calibrate-window requires admission disabled (window_bytes = 0)".into(),
        ));
    }
    let max_actors = config.actors.max(1);
    let values: Vec<String> = (1..=max_actors).map(|a| a.to_string()).collect();
    let reports = sweep(config, "actors", &values)?;
    let mut peak = 0usize;
    for (i, r) in reports.iter().enumerate() {
        if r.iops > reports[peak].iops {
            peak = i;
        }
    }
    let mut warning = None;
    if peak + 1 == reports.len() && reports.len() > 1 {
        warning = Some(format!(
            "no interior IOPS peak found in 1..={max_actors}; using in-flight bytes at {max_actors} actors"
        ));
    }
    let frag = config.fragment_bytes();
    let mean = reports[peak].mean_in_flight_bytes.max(frag as f64);
    let window = (mean as u64).div_ceil(frag) * frag;
    Ok(WindowCalibration { window_bytes: window, peak_actors: peak + 1, warning, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let toml = "actors = 2\nnot_a_field = 3\n";
        assert!(ScenarioConfig::from_toml_str(toml).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::default();
        let s = toml::to_string(&cfg).unwrap();
        let back = ScenarioConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn window_smaller_than_request_is_config_error() {
        let mut cfg = ScenarioConfig::default();
        cfg.admission.window_bytes = 64 * 1024; // one 128 KiB block cannot fit
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("window_bytes"));
    }

    #[test]
    fn invalid_axis_is_error() {
        let mut cfg = ScenarioConfig::default();
        assert!(set_axis(&mut cfg, "bogus", "1").is_err());
        assert!(set_axis(&mut cfg, "actors", "3").is_ok());
        assert_eq!(cfg.actors, 3);
    }
}
