//! Analytic wire-byte model for the transport kinds the harness knows about.
//!
//! Every packet on an InfiniBand link carries a fixed set of headers. A message
//! larger than the MTU is split into several packets and pays the headers once
//! per packet. The functions here compute those costs in closed form so that a
//! measured `port_xmit_data` delta can be decomposed into payload, modeled
//! header bytes and an unmodeled remainder.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Local routing header.
pub const LRH_BYTES: u64 = 8;
/// Base transport header.
pub const BTH_BYTES: u64 = 12;
/// Invariant CRC.
pub const ICRC_BYTES: u64 = 4;
/// Variant CRC.
pub const VCRC_BYTES: u64 = 2;
/// RDMA extended transport header.
pub const RETH_BYTES: u64 = 16;
/// Datagram extended transport header.
pub const DETH_BYTES: u64 = 8;
/// IPoIB encapsulation header.
pub const IPOIB_ENCAP_BYTES: u64 = 4;
/// IPv4 header without options.
pub const IPV4_HEADER_BYTES: u64 = 20;
/// Largest amount of IPv4 options a header may carry.
pub const IPV4_MAX_OPTION_BYTES: u64 = 40;
/// Ethernet frame header carried by libvma datagrams.
pub const ETHERNET_HEADER_BYTES: u64 = 14;
/// Extra address field libvma prepends.
pub const LIBVMA_ADDRESS_BYTES: u64 = 4;

/// Headers present on every InfiniBand packet: LRH + BTH + ICRC + VCRC.
pub const IB_BASE_HEADER_BYTES: u64 = LRH_BYTES + BTH_BYTES + ICRC_BYTES + VCRC_BYTES;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OverheadError {
    #[error("{0} has no fixed framing model")]
    NoFramingModel(TransportKind),
    #[error("overhead ratio undefined for zero-byte payload")]
    ZeroPayload,
    #[error("accounting error: measured {measured} bytes is less than payload total {payload}")]
    MeasuredBelowPayload { measured: u64, payload: u64 },
    #[error("counter comparison needs at least one message")]
    NoMessages,
    #[error("mtu must be at least 1 byte")]
    ZeroMtu,
}

/// Transport variants covered by the wire model. Only the RC kinds and
/// `RawStream` can actually be run; the UD kinds exist for the analytic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransportKind {
    RcMsg,
    RcRdmaWrite,
    RcRdmaRead,
    UdIpoib,
    UdLibvma,
    RawStream,
}

impl TransportKind {
    pub const ALL: [TransportKind; 6] = [
        TransportKind::RcMsg,
        TransportKind::RcRdmaWrite,
        TransportKind::RcRdmaRead,
        TransportKind::UdIpoib,
        TransportKind::UdLibvma,
        TransportKind::RawStream,
    ];

    /// Kinds that have a closed-form header model.
    pub const MODELED: [TransportKind; 5] = [
        TransportKind::RcMsg,
        TransportKind::RcRdmaWrite,
        TransportKind::RcRdmaRead,
        TransportKind::UdIpoib,
        TransportKind::UdLibvma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransportKind::RcMsg => "rc-msg",
            TransportKind::RcRdmaWrite => "rc-rdma-write",
            TransportKind::RcRdmaRead => "rc-rdma-read",
            TransportKind::UdIpoib => "ud-ipoib",
            TransportKind::UdLibvma => "ud-libvma",
            TransportKind::RawStream => "raw-stream",
        }
    }

    /// True for the RC kinds the verbs simulator can execute.
    pub fn is_simulated_verbs(self) -> bool {
        matches!(
            self,
            TransportKind::RcMsg | TransportKind::RcRdmaWrite | TransportKind::RcRdmaRead
        )
    }

    pub fn is_rdma(self) -> bool {
        matches!(self, TransportKind::RcRdmaWrite | TransportKind::RcRdmaRead)
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransportKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown transport kind `{s}`"))
    }
}

/// Knobs for header components that are optional on the wire.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeaderOptions {
    /// IPv4 option bytes added to every IPoIB packet (0..=40).
    pub ipv4_option_bytes: u64,
}

/// Number of packets a message occupies. Zero-byte messages still need one.
pub fn packet_count(payload: u64, mtu: u64) -> u64 {
    assert!(mtu >= 1, "mtu must be at least 1 byte");
    payload.div_ceil(mtu).max(1)
}

pub fn per_packet_header(kind: TransportKind) -> Result<u64, OverheadError> {
    per_packet_header_with(kind, HeaderOptions::default())
}

pub fn per_packet_header_with(
    kind: TransportKind,
    options: HeaderOptions,
) -> Result<u64, OverheadError> {
    let bytes = match kind {
        TransportKind::RcMsg => IB_BASE_HEADER_BYTES,
        // RETH is charged on every packet, not just the first one.
        TransportKind::RcRdmaWrite | TransportKind::RcRdmaRead => IB_BASE_HEADER_BYTES + RETH_BYTES,
        TransportKind::UdIpoib => {
            IB_BASE_HEADER_BYTES
                + DETH_BYTES
                + IPOIB_ENCAP_BYTES
                + IPV4_HEADER_BYTES
                + options.ipv4_option_bytes.min(IPV4_MAX_OPTION_BYTES)
        }
        TransportKind::UdLibvma => {
            IB_BASE_HEADER_BYTES + DETH_BYTES + LIBVMA_ADDRESS_BYTES + ETHERNET_HEADER_BYTES
        }
        TransportKind::RawStream => return Err(OverheadError::NoFramingModel(kind)),
    };
    Ok(bytes)
}

/// Bytes a single message puts on the wire: payload plus headers per packet.
pub fn per_message_wire_bytes(
    kind: TransportKind,
    payload: u64,
    mtu: u64,
) -> Result<u64, OverheadError> {
    per_message_wire_bytes_with(kind, payload, mtu, HeaderOptions::default())
}

pub fn per_message_wire_bytes_with(
    kind: TransportKind,
    payload: u64,
    mtu: u64,
    options: HeaderOptions,
) -> Result<u64, OverheadError> {
    if mtu == 0 {
        return Err(OverheadError::ZeroMtu);
    }
    let header = per_packet_header_with(kind, options)?;
    Ok(payload + packet_count(payload, mtu) * header)
}

/// Header bytes relative to payload, in percent.
pub fn overhead_percent(kind: TransportKind, payload: u64, mtu: u64) -> Result<f64, OverheadError> {
    if payload == 0 {
        return Err(OverheadError::ZeroPayload);
    }
    let wire = per_message_wire_bytes(kind, payload, mtu)?;
    Ok(100.0 * (wire - payload) as f64 / payload as f64)
}

/// Per-message overhead digest. For analytic reports `residual_unmodeled` is
/// `None`; counter comparisons fill it with measured minus modeled overhead.
#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub kind: TransportKind,
    pub payload_size: u64,
    pub packets: u64,
    pub wire_bytes_per_message: f64,
    pub overhead_bytes: f64,
    pub overhead_percent: f64,
    pub residual_unmodeled: Option<f64>,
}

impl OverheadReport {
    /// A negative residual means the counter saw fewer bytes than the headers
    /// alone require, which cannot happen on a real link.
    pub fn is_anomalous(&self) -> bool {
        self.residual_unmodeled.is_some_and(|r| r < 0.0)
    }
}

pub fn analytic_report(
    kind: TransportKind,
    payload: u64,
    mtu: u64,
) -> Result<OverheadReport, OverheadError> {
    let wire = per_message_wire_bytes(kind, payload, mtu)?;
    let overhead = (wire - payload) as f64;
    Ok(OverheadReport {
        kind,
        payload_size: payload,
        packets: packet_count(payload, mtu),
        wire_bytes_per_message: wire as f64,
        overhead_bytes: overhead,
        overhead_percent: if payload == 0 {
            f64::INFINITY
        } else {
            100.0 * overhead / payload as f64
        },
        residual_unmodeled: None,
    })
}

/// Port counter reading for one homogeneous workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterSample {
    pub measured_xmit: u64,
    pub payload_total: u64,
    pub messages: u64,
}

/// Splits a measured transmit counter into payload, modeled headers and the
/// remaining unmodeled bytes (software protocols, retransmissions).
pub fn compare_counters(
    kind: TransportKind,
    mtu: u64,
    sample: CounterSample,
) -> Result<OverheadReport, OverheadError> {
    let CounterSample {
        measured_xmit,
        payload_total,
        messages,
    } = sample;
    if messages == 0 {
        return Err(OverheadError::NoMessages);
    }
    if measured_xmit < payload_total {
        return Err(OverheadError::MeasuredBelowPayload {
            measured: measured_xmit,
            payload: payload_total,
        });
    }
    let payload_size = payload_total / messages;
    let analytic = analytic_report(kind, payload_size, mtu)?;
    let measured_overhead = (measured_xmit - payload_total) as f64 / messages as f64;
    Ok(OverheadReport {
        kind,
        payload_size,
        packets: analytic.packets,
        wire_bytes_per_message: payload_size as f64 + measured_overhead,
        overhead_bytes: measured_overhead,
        overhead_percent: if payload_size == 0 {
            f64::INFINITY
        } else {
            100.0 * measured_overhead / payload_size as f64
        },
        residual_unmodeled: Some(measured_overhead - analytic.overhead_bytes),
    })
}
