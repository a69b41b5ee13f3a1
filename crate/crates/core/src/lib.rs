//! Point-to-point network microbenchmarks: uni- and bi-directional
//! throughput, one-sided latency and ping-pong round trips over a TCP stream
//! or a simulated RDMA verbs transport with exact wire-byte accounting.

pub mod cli;
pub mod engine;
pub mod overhead;
pub mod report;
pub mod schedule;
pub mod simverbs;
pub mod stats;
pub mod transport;
