//! Trace generation and replay: burst patterns (small/medium/large),
//! Zipfian key-value mixes (ETC/SYS), and the line-oriented trace file
//! format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;
use crate::verbs::Direction;

pub const TRACE_HEADER: &str = "#rdmabox-trace v1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub arrive_at: SimTime,
    pub direction: Direction,
    pub node: u16,
    pub remote_addr: u64,
    pub len: u64,
    pub origin_actor: usize,
}

/// Clustered-burst workload shape. `cluster_size == 1` with
/// `closed_loop` gives the strictly sequential small pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstSpec {
    pub cluster_size: usize,
    pub inter_burst_gap_ns: u64,
    pub intra_burst_gap_ns: u64,
    pub total_requests: usize,
    pub req_len: u64,
    /// Wait for the whole pack to complete before the next pack issues.
    pub closed_loop: bool,
}

impl Default for BurstSpec {
    fn default() -> Self {
        BurstSpec {
            cluster_size: 1,
            inter_burst_gap_ns: 50_000,
            intra_burst_gap_ns: 2_000,
            total_requests: 10_000,
            req_len: 128 * 1024,
            closed_loop: false,
        }
    }
}

impl BurstSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.cluster_size < 1 {
            return Err("workload.cluster_size must be >= 1".into());
        }
        if self.total_requests < 1 {
            return Err("workload.total_requests must be >= 1".into());
        }
        if self.req_len == 0 {
            return Err("workload.req_len must be positive".into());
        }
        Ok(())
    }
}

/// Zipfian key-value mix over a block-sliced remote keyspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSpec {
    pub read_fraction: f64,
    pub zipf_theta: f64,
    pub keyspace_slots: usize,
    /// Probability the next access continues the previous one
    /// sequentially; point Zipfian accesses alone produce near-zero
    /// adjacency.
    pub seq_run_prob: f64,
    /// Mean inter-arrival gap per actor; the global stream runs `actors`
    /// times faster.
    pub mean_gap_ns: u64,
    pub req_len: u64,
    pub total_requests: usize,
}

impl Default for MixSpec {
    fn default() -> Self {
        MixSpec {
            read_fraction: 0.75,
            zipf_theta: 0.99,
            keyspace_slots: 16_384,
            seq_run_prob: 0.3,
            mean_gap_ns: 500,
            req_len: 128 * 1024,
            total_requests: 100_000,
        }
    }
}

impl MixSpec {
    /// 95% read / 5% write key-value mix.
    pub fn etc() -> Self {
        MixSpec { read_fraction: 0.95, ..Default::default() }
    }

    /// 75% read / 25% write key-value mix.
    pub fn sys() -> Self {
        MixSpec { read_fraction: 0.75, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err("workload.read_fraction must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.seq_run_prob) {
            return Err("workload.seq_run_prob must be in [0, 1]".into());
        }
        if self.zipf_theta < 0.0 {
            return Err("workload.zipf_theta must be >= 0".into());
        }
        if self.keyspace_slots < 1 || self.total_requests < 1 || self.req_len == 0 {
            return Err("workload keyspace/requests/req_len must be positive".into());
        }
        Ok(())
    }
}

/// Deterministic clustered-burst trace. Requests fan out round-robin over
/// `peers`; each actor walks its own sequential block region per node, so
/// adjacency shows up exactly when arrivals stack.
pub fn gen_burst(spec: &BurstSpec, actors: usize, peers: usize) -> Vec<TraceRecord> {
    assert!(actors >= 1 && peers >= 1);
    let per_actor = spec.total_requests / actors;
    let mut extra = spec.total_requests % actors;
    let mut records = Vec::with_capacity(spec.total_requests);
    for a in 0..actors {
        let mut n = per_actor;
        if extra > 0 {
            n += 1;
            extra -= 1;
        }
        let mut cursors = vec![0u64; peers];
        for k in 0..n {
            let pack = k / spec.cluster_size;
            let slot_in_pack = (k % spec.cluster_size) as u64;
            let pack_span =
                spec.cluster_size as u64 * spec.intra_burst_gap_ns + spec.inter_burst_gap_ns;
            let at = pack as u64 * pack_span + slot_in_pack * spec.intra_burst_gap_ns;
            let node = ((a + k) % peers) as u16;
            let cursor = &mut cursors[node as usize];
            // Per-actor region, laid out sequentially.
            let remote_addr = a as u64 * (1u64 << 32) + *cursor * spec.req_len;
            *cursor += 1;
            records.push(TraceRecord {
                arrive_at: SimTime(at),
                direction: Direction::Write,
                node,
                remote_addr,
                len: spec.req_len,
                origin_actor: a,
            });
        }
    }
    records.sort_by_key(|r| (r.arrive_at, r.origin_actor, r.remote_addr));
    records
}

/// Zipfian key-value trace. Hot slots are low ranks laid out contiguously
/// (address = rank-slot x block size), so hot neighborhoods are adjacent;
/// a sequential-run knob extends runs explicitly. Runs stay on one actor.
pub fn gen_kv(mix: &MixSpec, n: usize, actors: usize, peers: usize, seed: u64) -> Vec<TraceRecord> {
    assert!(actors >= 1 && peers >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = if mix.zipf_theta > 0.0 {
        Some(Zipf::new(mix.keyspace_slots as u64, mix.zipf_theta).expect("zipf parameters"))
    } else {
        None
    };
    let per_node = (mix.keyspace_slots + peers - 1) / peers;
    let mut records = Vec::with_capacity(n);
    let mut t = 0u64;
    let mut actor_cursor = 0usize;
    let mut prev: Option<TraceRecord> = None;
    let global_gap = (mix.mean_gap_ns as f64 / actors as f64).max(1.0);
    for _ in 0..n {
        let gap_u: f64 = rng.gen::<f64>();
        t += (-(1.0 - gap_u).ln() * global_gap) as u64;
        let continue_run = prev.is_some() && rng.gen::<f64>() < mix.seq_run_prob;
        let rec = if continue_run {
            let p = prev.unwrap();
            TraceRecord {
                arrive_at: SimTime(t),
                remote_addr: p.remote_addr + p.len,
                ..p
            }
        } else {
            let slot = match &zipf {
                Some(z) => z.sample(&mut rng) as usize - 1,
                None => rng.gen_range(0..mix.keyspace_slots),
            };
            let node = (slot / per_node) as u16;
            let addr = ((slot % per_node) as u64) * mix.req_len;
            let is_read = rng.gen::<f64>() < mix.read_fraction;
            let actor = actor_cursor % actors;
            actor_cursor += 1;
            TraceRecord {
                arrive_at: SimTime(t),
                direction: if is_read { Direction::Read } else { Direction::Write },
                node,
                remote_addr: addr,
                len: mix.req_len,
                origin_actor: actor,
            }
        };
        prev = Some(rec);
        records.push(rec);
    }
    records
}

fn dir_char(d: Direction) -> char {
    match d {
        Direction::Read => 'R',
        Direction::Write => 'W',
    }
}

/// Write a trace in the v1 line format: one record per line,
/// `arrive_at_ns,direction,node,remote_addr_hex,len,actor` with lowercase
/// unprefixed hex addresses.
pub fn save_trace<W: Write>(out: &mut W, trace: &[TraceRecord]) -> Result<(), TraceError> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{:x},{},{}",
            r.arrive_at.nanos(),
            dir_char(r.direction),
            r.node,
            r.remote_addr,
            r.len,
            r.origin_actor
        )?;
    }
    Ok(())
}

pub fn save_trace_file(path: &Path, trace: &[TraceRecord]) -> Result<(), TraceError> {
    let mut f = std::fs::File::create(path)?;
    save_trace(&mut f, trace)
}

pub fn load_trace<R: std::io::Read>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let reader = BufReader::new(input);
    let mut records = Vec::new();
    let mut last_at = 0u64;
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h == TRACE_HEADER => {}
        Some((_, Ok(h))) => {
            return Err(TraceError::Parse {
                line: 1,
                msg: format!("bad header {h:?}, expected {TRACE_HEADER:?}"),
            })
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => return Ok(records), // empty file -> empty trace
    }
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let parse = |msg: String| TraceError::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse(format!("expected 6 fields, got {}", fields.len())));
        }
        let arrive_at: u64 =
            fields[0].parse().map_err(|e| parse(format!("arrive_at_ns: {e}")))?;
        let direction = match fields[1] {
            "R" => Direction::Read,
            "W" => Direction::Write,
            other => return Err(parse(format!("direction must be R or W, got {other:?}"))),
        };
        let node: u16 = fields[2].parse().map_err(|e| parse(format!("node: {e}")))?;
        let remote_addr = u64::from_str_radix(fields[3], 16)
            .map_err(|e| parse(format!("remote_addr_hex: {e}")))?;
        let len: u64 = fields[4].parse().map_err(|e| parse(format!("len: {e}")))?;
        let origin_actor: usize =
            fields[5].parse().map_err(|e| parse(format!("actor: {e}")))?;
        if len == 0 {
            return Err(parse("len must be positive".into()));
        }
        if arrive_at < last_at {
            return Err(parse(format!(
                "non-monotone timestamp {arrive_at} after {last_at}"
            )));
        }
        last_at = arrive_at;
        records.push(TraceRecord {
            arrive_at: SimTime(arrive_at),
            direction,
            node,
            remote_addr,
            len,
            origin_actor,
        });
    }
    Ok(records)
}

pub fn load_trace_file(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let f = std::fs::File::open(path)?;
    load_trace(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burst_trace_is_deterministic_and_sorted() {
        let spec = BurstSpec { cluster_size: 4, total_requests: 64, ..Default::default() };
        let a = gen_burst(&spec, 2, 2);
        let b = gen_burst(&spec, 2, 2);
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.windows(2).all(|w| w[0].arrive_at <= w[1].arrive_at));
    }

    #[test]
    fn kv_trace_same_seed_identical() {
        let mix = MixSpec { total_requests: 1000, ..MixSpec::etc() };
        let a = gen_kv(&mix, 1000, 4, 2, 7);
        let b = gen_kv(&mix, 1000, 4, 2, 7);
        assert_eq!(a, b);
        let c = gen_kv(&mix, 1000, 4, 2, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn etc_read_fraction_within_one_percent() {
        let mix = MixSpec { seq_run_prob: 0.0, ..MixSpec::etc() };
        let n = 100_000;
        let trace = gen_kv(&mix, n, 4, 2, 11);
        let reads = trace.iter().filter(|r| r.direction == Direction::Read).count();
        let frac = reads as f64 / n as f64;
        assert!((0.94..=0.96).contains(&frac), "read fraction {frac}");
    }

    #[test]
    fn zipf_zero_theta_is_roughly_uniform() {
        let mix = MixSpec {
            zipf_theta: 0.0,
            seq_run_prob: 0.0,
            keyspace_slots: 64,
            ..MixSpec::etc()
        };
        let n = 64_000;
        let trace = gen_kv(&mix, n, 1, 1, 3);
        let mut hist = vec![0u64; 64];
        for r in &trace {
            hist[(r.remote_addr / mix.req_len) as usize] += 1;
        }
        // Chi-square against uniform: 63 dof, 1e-4 tail is ~117.
        let expected = n as f64 / 64.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 117.0, "chi2 = {chi2}");
    }

    #[test]
    fn zipf_hot_ranks_take_mass_predicted_by_closed_form() {
        // Independent oracle: normalized zipf mass over the top 1% of ranks.
        let theta = 0.99;
        let slots = 1000usize;
        let top = slots / 100;
        let mass = |k: usize| (k as f64).powf(-theta);
        let total: f64 = (1..=slots).map(mass).sum();
        let expected_share: f64 = (1..=top).map(mass).sum::<f64>() / total;

        let mix = MixSpec {
            zipf_theta: theta,
            seq_run_prob: 0.0,
            keyspace_slots: slots,
            ..MixSpec::etc()
        };
        let n = 100_000;
        let trace = gen_kv(&mix, n, 1, 1, 5);
        let hot = trace
            .iter()
            .filter(|r| ((r.remote_addr / mix.req_len) as usize) < top)
            .count();
        let share = hot as f64 / n as f64;
        assert!(share > 0.01 * 2.0, "top 1% got {share}, barely above uniform");
        assert!(
            (share - expected_share).abs() < 0.02,
            "share {share} vs oracle {expected_share}"
        );
    }

    #[test]
    fn trace_round_trip_identity() {
        let mix = MixSpec { total_requests: 500, ..MixSpec::sys() };
        let trace = gen_kv(&mix, 500, 3, 2, 9);
        let mut buf = Vec::new();
        save_trace(&mut buf, &trace).unwrap();
        let loaded = load_trace(&buf[..]).unwrap();
        assert_eq!(trace, loaded);
    }

    #[test]
    fn empty_file_is_empty_trace() {
        let loaded = load_trace(&b""[..]).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn load_rejects_non_monotone_timestamps() {
        let data = format!("{TRACE_HEADER}\n100,W,0,0,4096,0\n50,W,0,1000,4096,0\n");
        let err = load_trace(data.as_bytes()).unwrap_err();
        match err {
            TraceError::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("non-monotone"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_reports_line_numbers() {
        let data = format!("{TRACE_HEADER}\n100,X,0,0,4096,0\n");
        match load_trace(data.as_bytes()).unwrap_err() {
            TraceError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
