//! Benchmark patterns: uni- and bi-directional throughput, one-sided latency
//! and ping-pong, over either the TCP stream transport ([`stream`]) or the
//! simulated verbs transport ([`verbs`]).

pub mod stream;
pub mod verbs;

use thiserror::Error;

use crate::simverbs::{CompletionStatus, SimError, VerbsOp};
use crate::stats::{self, LatencySamples, RunMetrics, StatSummary, StatsError, Throughput};
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("transport failed at message {index}: {source}")]
    Transport {
        index: u64,
        #[source]
        source: TransportError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{op:?} request {request_id} completed with {status:?}")]
    Completion {
        op: VerbsOp,
        request_id: u64,
        status: CompletionStatus,
    },
    #[error("echo mismatch at iteration {iteration}")]
    EchoMismatch { iteration: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0} is not runnable on this path")]
    Unsupported(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl EngineError {
    pub(crate) fn transport(index: u64) -> impl FnOnce(TransportError) -> EngineError {
        move |source| EngineError::Transport { index, source }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, EngineError::Transport { .. })
    }
}

/// Result of one (payload size, run) measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub payload_size: u64,
    pub run_index: u32,
    /// Measured messages, warmup excluded. Bi-directional runs count both
    /// directions; ping-pong runs count round trips.
    pub messages: u64,
    pub elapsed_ns: u64,
    pub latency: Option<LatencySamples>,
    /// Bytes on the wire summed over both ports (simulated verbs only).
    pub wire_bytes: Option<u64>,
    pub rnr_naks: Option<u64>,
    /// Payload bytes this side sent during the measured phase.
    pub bytes_sent: u64,
    /// Payload bytes this side received during the measured phase.
    pub bytes_received: u64,
}

impl RunReport {
    pub fn throughput(&self) -> Result<Throughput, StatsError> {
        stats::throughput(self.messages, self.payload_size, self.elapsed_ns)
    }

    pub fn latency_summary(&self) -> Option<StatSummary> {
        self.latency.as_ref().and_then(|s| stats::summarize(s).ok())
    }

    /// Header overhead relative to the payload moved in either direction.
    pub fn overhead_pct(&self) -> Option<f64> {
        let payload = self.bytes_sent + self.bytes_received;
        let wire = self.wire_bytes?;
        (payload > 0 && wire >= payload).then(|| 100.0 * (wire - payload) as f64 / payload as f64)
    }

    pub fn metrics(&self) -> Result<RunMetrics, StatsError> {
        let tp = self.throughput()?;
        let summary = self.latency_summary();
        Ok(RunMetrics {
            payload_size: self.payload_size,
            mmps: tp.mmps,
            mbps: tp.mbps,
            avg_us: summary.map(|s| s.avg_us),
            p999_us: summary.map(|s| s.p999_us),
            p9999_us: summary.map(|s| s.p9999_us),
            overhead_pct: self.overhead_pct(),
        })
    }
}

/// Fills a payload buffer with a recognizable byte pattern.
pub fn payload_pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed))
        .collect()
}
