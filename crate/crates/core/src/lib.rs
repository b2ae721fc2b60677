//! Offload-centric latent-cache serving simulator for sparse-attention decode.
//!
//! The crate is layered bottom-up: [`scenario`] plans memory, [`trace`] holds
//! top-K access traces, [`cache`] replays them through per-layer LRU pools,
//! [`costmodel`] prices compute and PCIe transfers, and [`pipeline`] composes
//! per-layer timelines into iteration latency and throughput.

pub mod cache;
pub mod calibration;
pub mod costmodel;
pub mod pipeline;
pub mod reference;
pub mod scenario;
pub mod trace;
