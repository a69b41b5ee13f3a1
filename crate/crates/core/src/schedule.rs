//! Benchmark configuration and the payload-size / message-count sweep.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::overhead::TransportKind;
use crate::simverbs::LinkTiming;

/// Default message count at small sizes for throughput modes.
pub const DEFAULT_THROUGHPUT_COUNT: u64 = 1_000_000;
/// Default message count at small sizes for latency modes.
pub const DEFAULT_LATENCY_COUNT: u64 = 100_000;
pub const DEFAULT_MIN_SIZE: u64 = 1;
pub const DEFAULT_MAX_SIZE: u64 = 1 << 20;
pub const DEFAULT_HALVE_FROM: u64 = 8 << 10;
pub const DEFAULT_QUEUE_DEPTH: usize = 128;
pub const DEFAULT_POST_BATCH: usize = 1;
pub const DEFAULT_RUNS: u32 = 3;
pub const DEFAULT_MTU: u64 = 4096;
pub const DEFAULT_RNR_DELAY_US: u64 = 10;
pub const DEFAULT_RNR_RETRY_LIMIT: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Unidir,
    Bidir,
    Latency,
    Pingpong,
    Overhead,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Unidir,
        Mode::Bidir,
        Mode::Latency,
        Mode::Pingpong,
        Mode::Overhead,
    ];

    /// Ordinal carried in the handshake frame.
    pub fn ordinal(self) -> u8 {
        match self {
            Mode::Unidir => 0,
            Mode::Bidir => 1,
            Mode::Latency => 2,
            Mode::Pingpong => 3,
            Mode::Overhead => 4,
        }
    }

    pub fn from_ordinal(ordinal: u8) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.ordinal() == ordinal)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unidir => "unidir",
            Mode::Bidir => "bidir",
            Mode::Latency => "latency",
            Mode::Pingpong => "pingpong",
            Mode::Overhead => "overhead",
        }
    }

    /// Modes that run with a single outstanding message.
    pub fn is_latency_pattern(self) -> bool {
        matches!(self, Mode::Latency | Mode::Pingpong | Mode::Overhead)
    }

    /// Modes whose traffic follows the ping-pong exchange.
    pub fn is_pingpong_pattern(self) -> bool {
        matches!(self, Mode::Pingpong | Mode::Overhead)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Server,
    Client,
}

/// A single violated configuration constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl Violation {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Violation {
            field,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("malformed size `{0}`")]
    MalformedSize(String),
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::MalformedSize(_) => &[],
        }
    }

    /// True if some violation names `field`.
    pub fn mentions(&self, field: &str) -> bool {
        self.violations().iter().any(|v| v.field == field)
    }
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub mode: Mode,
    pub transport: TransportKind,
    pub role: Role,
    /// `host:port`, required for the stream transport.
    pub endpoint: Option<String>,
    pub base_count: u64,
    pub min_size: u64,
    pub max_size: u64,
    pub halve_from: u64,
    pub queue_depth: usize,
    pub post_batch: usize,
    pub runs: u32,
    pub mtu: u64,
    pub rnr_delay_us: u64,
    pub rnr_retry_limit: u32,
    pub warmup_count: u64,
    pub out_dir: PathBuf,
    pub sim_timing: LinkTiming,
    pub connect_timeout: Duration,
    /// Abort a run after this long without progress.
    pub progress_timeout: Duration,
}

impl BenchmarkConfig {
    pub fn new(mode: Mode, transport: TransportKind) -> Self {
        BenchmarkConfig {
            mode,
            transport,
            role: Role::Client,
            endpoint: None,
            base_count: if mode.is_latency_pattern() {
                DEFAULT_LATENCY_COUNT
            } else {
                DEFAULT_THROUGHPUT_COUNT
            },
            min_size: DEFAULT_MIN_SIZE,
            max_size: DEFAULT_MAX_SIZE,
            halve_from: DEFAULT_HALVE_FROM,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            post_batch: DEFAULT_POST_BATCH,
            runs: DEFAULT_RUNS,
            mtu: DEFAULT_MTU,
            rnr_delay_us: DEFAULT_RNR_DELAY_US,
            rnr_retry_limit: DEFAULT_RNR_RETRY_LIMIT,
            warmup_count: 0,
            out_dir: PathBuf::from("."),
            sim_timing: LinkTiming::default(),
            connect_timeout: Duration::from_secs(30),
            progress_timeout: Duration::from_secs(60),
        }
    }

    pub fn schedule(&self) -> Result<Vec<SchedulePoint>, ConfigError> {
        build_schedule(
            self.base_count,
            self.min_size,
            self.max_size,
            self.halve_from,
        )
    }

    /// Warmup messages actually excluded for a point; at least one message
    /// is always measured.
    pub fn effective_warmup(&self, message_count: u64) -> u64 {
        self.warmup_count.min(message_count.saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulePoint {
    pub payload_size: u64,
    pub message_count: u64,
}

fn check_power_of_two(field: &'static str, value: u64, out: &mut Vec<Violation>) {
    if !value.is_power_of_two() {
        out.push(Violation::new(field, format!("{field} not a power of two")));
    }
}

fn size_violations(min_size: u64, max_size: u64, halve_from: u64) -> Vec<Violation> {
    let mut out = Vec::new();
    check_power_of_two("min_size", min_size, &mut out);
    check_power_of_two("max_size", max_size, &mut out);
    check_power_of_two("halve_from", halve_from, &mut out);
    if min_size > max_size {
        out.push(Violation::new("min_size", "min_size exceeds max_size"));
    }
    if max_size > u32::MAX as u64 {
        out.push(Violation::new("max_size", "max_size exceeds 4 GiB - 1"));
    }
    out
}

/// One point per power of two in `[min_size, max_size]`. Sizes below
/// `halve_from` get `base_count` messages; `halve_from` itself already gets
/// half, and every further doubling of the size halves the count again,
/// never dropping below one.
pub fn build_schedule(
    base_count: u64,
    min_size: u64,
    max_size: u64,
    halve_from: u64,
) -> Result<Vec<SchedulePoint>, ConfigError> {
    let mut violations = size_violations(min_size, max_size, halve_from);
    if base_count == 0 {
        violations.push(Violation::new(
            "base_count",
            "base_count must be at least 1",
        ));
    }
    if !violations.is_empty() {
        return Err(ConfigError::Invalid(violations));
    }

    let mut points = Vec::new();
    let mut size = min_size;
    while size <= max_size {
        points.push(SchedulePoint {
            payload_size: size,
            message_count: count_for_size(base_count, size, halve_from),
        });
        size <<= 1;
    }
    Ok(points)
}

fn count_for_size(base_count: u64, size: u64, halve_from: u64) -> u64 {
    if size < halve_from {
        return base_count;
    }
    let doublings = (size / halve_from).trailing_zeros() + 1;
    base_count.checked_shr(doublings).unwrap_or(0).max(1)
}

/// Parses `N`, `NK` or `NM` with binary multiples.
pub fn parse_size(text: &str) -> Result<u64, ConfigError> {
    let malformed = || ConfigError::MalformedSize(text.to_string());
    let trimmed = text.trim();
    let (digits, shift) = match trimmed.chars().last() {
        Some('k' | 'K') => (&trimmed[..trimmed.len() - 1], 10),
        Some('m' | 'M') => (&trimmed[..trimmed.len() - 1], 20),
        _ => (trimmed, 0),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed());
    }
    let value: u64 = digits.parse().map_err(|_| malformed())?;
    let bytes = value.checked_mul(1 << shift).ok_or_else(malformed)?;
    if bytes == 0 {
        return Err(malformed());
    }
    Ok(bytes)
}

/// Shortest `parse_size`-compatible rendering of `bytes`.
pub fn format_size(bytes: u64) -> String {
    if bytes != 0 && bytes.is_multiple_of(1 << 20) {
        format!("{}M", bytes >> 20)
    } else if bytes != 0 && bytes.is_multiple_of(1 << 10) {
        format!("{}K", bytes >> 10)
    } else {
        bytes.to_string()
    }
}

/// Checks every invariant, collecting all violations, and normalizes the
/// queue settings of single-message modes to one outstanding request.
pub fn validate_config(mut config: BenchmarkConfig) -> Result<BenchmarkConfig, ConfigError> {
    let mut violations = size_violations(config.min_size, config.max_size, config.halve_from);
    check_power_of_two("mtu", config.mtu, &mut violations);

    if config.base_count == 0 {
        violations.push(Violation::new(
            "base_count",
            "base_count must be at least 1",
        ));
    }
    if config.runs == 0 {
        violations.push(Violation::new("runs", "runs must be at least 1"));
    }

    if config.mode.is_latency_pattern() {
        config.queue_depth = 1;
        config.post_batch = 1;
    } else {
        if config.queue_depth == 0 {
            violations.push(Violation::new(
                "queue_depth",
                "queue_depth must be at least 1",
            ));
        }
        if config.post_batch == 0 {
            violations.push(Violation::new(
                "post_batch",
                "post_batch must be at least 1",
            ));
        } else if config.post_batch > config.queue_depth {
            violations.push(Violation::new(
                "post_batch",
                "post_batch exceeds queue_depth",
            ));
        }
    }

    match config.transport {
        TransportKind::UdIpoib | TransportKind::UdLibvma => violations.push(Violation::new(
            "transport",
            format!(
                "{} is an analytic model only and cannot be run",
                config.transport
            ),
        )),
        TransportKind::RcRdmaWrite | TransportKind::RcRdmaRead
            if config.mode.is_pingpong_pattern() =>
        {
            violations.push(Violation::new(
                "mode",
                format!("{} is not supported over {}", config.mode, config.transport),
            ))
        }
        TransportKind::RawStream if config.endpoint.is_none() => violations.push(Violation::new(
            "endpoint",
            "stream transport needs --listen or --connect",
        )),
        _ => {}
    }

    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}
