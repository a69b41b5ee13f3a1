//! Latency digests, nearest-rank percentiles, throughput conversion and
//! min/avg/max aggregation across repeated runs.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no samples")]
    Empty,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(f64),
    #[error("elapsed time must be positive")]
    ZeroElapsed,
    #[error("cannot aggregate runs of different payload sizes ({0} and {1})")]
    MixedSizes(u64, u64),
}

/// Raw per-operation durations in nanoseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatencySamples {
    samples: Vec<u64>,
}

impl LatencySamples {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        LatencySamples {
            samples: Vec::with_capacity(n),
        }
    }

    pub fn record(&mut self, nanos: u64) {
        self.samples.push(nanos);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.samples
    }
}

impl From<Vec<u64>> for LatencySamples {
    fn from(samples: Vec<u64>) -> Self {
        LatencySamples { samples }
    }
}

/// Percent in parts-per-million so ranks are computed in integers;
/// `99.9 / 100.0 * 1000.0` is not exactly 999 in binary floating point.
fn percent_to_ppm(p: f64) -> Result<u64, StatsError> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(StatsError::BadPercentile(p));
    }
    Ok((p * 10_000.0).round() as u64)
}

/// 1-based nearest rank `ceil(p/100 * n)`.
fn nearest_rank(ppm: u64, n: usize) -> usize {
    let scaled = ppm as u128 * n as u128;
    let rank = scaled.div_ceil(1_000_000) as usize;
    rank.clamp(1, n)
}

fn percentile_of_sorted(sorted: &[u64], ppm: u64) -> u64 {
    sorted[nearest_rank(ppm, sorted.len()) - 1]
}

/// Nearest-rank percentile without interpolation.
pub fn percentile(samples: &LatencySamples, p: f64) -> Result<u64, StatsError> {
    let ppm = percent_to_ppm(p)?;
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut sorted = samples.samples.clone();
    sorted.sort_unstable();
    Ok(percentile_of_sorted(&sorted, ppm))
}

/// Latency digest in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatSummary {
    pub count: usize,
    pub avg_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub p999_us: f64,
    pub p9999_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

fn ns_to_us(ns: u64) -> f64 {
    ns as f64 / 1000.0
}

pub fn summarize(samples: &LatencySamples) -> Result<StatSummary, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut sorted = samples.samples.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let sum: u128 = sorted.iter().map(|&s| s as u128).sum();
    let min_us = ns_to_us(sorted[0]);
    let max_us = ns_to_us(sorted[n - 1]);
    let avg_us = (sum as f64 / n as f64 / 1000.0).clamp(min_us, max_us);
    let at = |p: f64| ns_to_us(percentile_of_sorted(&sorted, (p * 10_000.0).round() as u64));
    Ok(StatSummary {
        count: n,
        avg_us,
        p50_us: at(50.0),
        p99_us: at(99.0),
        p999_us: at(99.9),
        p9999_us: at(99.99),
        min_us,
        max_us,
    })
}

/// Message rate and data rate in decimal units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    /// Million messages per second.
    pub mmps: f64,
    /// 10^6 bytes per second.
    pub mbps: f64,
}

pub fn throughput(
    messages: u64,
    payload_size: u64,
    elapsed_ns: u64,
) -> Result<Throughput, StatsError> {
    if elapsed_ns == 0 {
        return Err(StatsError::ZeroElapsed);
    }
    let secs = elapsed_ns as f64 / 1e9;
    let mmps = messages as f64 / secs / 1e6;
    let mbps = messages as f64 * payload_size as f64 / secs / 1e6;
    Ok(Throughput { mmps, mbps })
}

/// Metrics of one run in the units that get aggregated and plotted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub payload_size: u64,
    pub mmps: f64,
    pub mbps: f64,
    pub avg_us: Option<f64>,
    pub p999_us: Option<f64>,
    pub p9999_us: Option<f64>,
    pub overhead_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinAvgMax {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

impl MinAvgMax {
    fn over(values: &[f64]) -> MinAvgMax {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        MinAvgMax {
            min,
            avg: avg.clamp(min, max),
            max,
        }
    }

    /// Aggregates only if every run carries the metric.
    fn over_optional(values: impl Iterator<Item = Option<f64>>) -> Option<MinAvgMax> {
        let collected: Option<Vec<f64>> = values.collect();
        collected
            .filter(|v| !v.is_empty())
            .map(|v| MinAvgMax::over(&v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatedPoint {
    pub payload_size: u64,
    pub runs: usize,
    pub mmps: MinAvgMax,
    pub mbps: MinAvgMax,
    pub avg_us: Option<MinAvgMax>,
    pub p999_us: Option<MinAvgMax>,
    pub p9999_us: Option<MinAvgMax>,
    pub overhead_pct: Option<MinAvgMax>,
}

/// Per-metric min, arithmetic mean and max over runs of one payload size.
pub fn aggregate_metrics(runs: &[RunMetrics]) -> Result<AggregatedPoint, StatsError> {
    let first = runs.first().ok_or(StatsError::Empty)?;
    if let Some(other) = runs.iter().find(|r| r.payload_size != first.payload_size) {
        return Err(StatsError::MixedSizes(
            first.payload_size,
            other.payload_size,
        ));
    }
    let column = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    Ok(AggregatedPoint {
        payload_size: first.payload_size,
        runs: runs.len(),
        mmps: MinAvgMax::over(&column(|r| r.mmps)),
        mbps: MinAvgMax::over(&column(|r| r.mbps)),
        avg_us: MinAvgMax::over_optional(runs.iter().map(|r| r.avg_us)),
        p999_us: MinAvgMax::over_optional(runs.iter().map(|r| r.p999_us)),
        p9999_us: MinAvgMax::over_optional(runs.iter().map(|r| r.p9999_us)),
        overhead_pct: MinAvgMax::over_optional(runs.iter().map(|r| r.overhead_pct)),
    })
}

/// Groups metrics by payload size (ascending) and aggregates each group.
pub fn aggregate_by_size(runs: &[RunMetrics]) -> Vec<AggregatedPoint> {
    let mut sizes: Vec<u64> = runs.iter().map(|r| r.payload_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .filter_map(|size| {
            let group: Vec<RunMetrics> = runs
                .iter()
                .filter(|r| r.payload_size == size)
                .copied()
                .collect();
            aggregate_metrics(&group).ok()
        })
        .collect()
}
