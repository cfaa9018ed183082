//! Discrete-event model of an RDMA NIC and the I/O-path optimizations
//! around it: request merging and doorbell chaining through a single merge
//! queue, window-based admission control, and adaptive completion polling.
//!
//! The crate is a library plus a CLI harness (`rdmabox-sim`). Scenarios
//! compose a workload (burst patterns or Zipfian key-value mixes), a
//! batching mode, an admission window, and a polling strategy over a NIC
//! model with finite WQE/QP/MPT caches. Runs are deterministic: identical
//! configuration and seed produce byte-identical reports.

pub mod admission;
pub mod batching;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod nic;
pub mod polling;
pub mod presets;
pub mod sim;
pub mod verbs;
pub mod workload;
