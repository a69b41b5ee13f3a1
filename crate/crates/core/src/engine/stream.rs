//! Benchmark patterns over a blocking byte stream.
//!
//! Messages are fixed-size and unframed: both peers know the payload size
//! and count from the handshake. Throughput runs take two timestamps; the
//! latency runs take one sample per message.

use std::thread;
use std::time::Instant;

use super::{payload_pattern, EngineError, RunReport};
use crate::schedule::{BenchmarkConfig, Mode, Role, SchedulePoint};
use crate::stats::LatencySamples;
use crate::transport::{BlockingRecv, BlockingSend, Connection};

/// Byte sent by the receiver once it has drained a phase.
pub const COMPLETION_TOKEN: u8 = 0xA5;

fn elapsed_ns(start: Instant) -> u64 {
    (start.elapsed().as_nanos() as u64).max(1)
}

fn send_messages<S: BlockingSend + ?Sized>(
    tx: &mut S,
    buf: &[u8],
    first_index: u64,
    count: u64,
) -> Result<(), EngineError> {
    for i in 0..count {
        tx.send_blocking(buf)
            .map_err(EngineError::transport(first_index + i))?;
    }
    Ok(())
}

fn recv_messages<R: BlockingRecv + ?Sized>(
    rx: &mut R,
    buf: &mut [u8],
    first_index: u64,
    count: u64,
) -> Result<u64, EngineError> {
    for i in 0..count {
        rx.recv_into(buf)
            .map_err(EngineError::transport(first_index + i))?;
    }
    Ok(count * buf.len() as u64)
}

fn send_token<S: BlockingSend + ?Sized>(tx: &mut S, index: u64) -> Result<(), EngineError> {
    tx.send_blocking(&[COMPLETION_TOKEN])
        .map_err(EngineError::transport(index))
}

fn recv_token<R: BlockingRecv + ?Sized>(rx: &mut R, index: u64) -> Result<(), EngineError> {
    let mut token = [0u8; 1];
    rx.recv_into(&mut token)
        .map_err(EngineError::transport(index))?;
    if token[0] != COMPLETION_TOKEN {
        return Err(EngineError::Protocol(format!(
            "expected completion token, got {:#04x}",
            token[0]
        )));
    }
    Ok(())
}

fn base_report(point: SchedulePoint, run_index: u32, messages: u64, elapsed: u64) -> RunReport {
    RunReport {
        payload_size: point.payload_size,
        run_index,
        messages,
        elapsed_ns: elapsed,
        latency: None,
        wire_bytes: None,
        rnr_naks: None,
        bytes_sent: 0,
        bytes_received: 0,
    }
}

/// Client streams the messages; the server drains them and answers with a
/// one-byte token, so the client's clock covers the full drain.
pub fn run_unidirectional(
    conn: &mut Connection,
    point: SchedulePoint,
    config: &BenchmarkConfig,
    run_index: u32,
) -> Result<RunReport, EngineError> {
    let size = point.payload_size as usize;
    let warmup = config.effective_warmup(point.message_count);
    let measured = point.message_count - warmup;
    match conn.role() {
        Role::Client => {
            let buf = payload_pattern(size, run_index as u8);
            send_messages(conn, &buf, 0, warmup)?;
            let start = Instant::now();
            send_messages(conn, &buf, warmup, measured)?;
            recv_token(conn, point.message_count)?;
            let mut report = base_report(point, run_index, measured, elapsed_ns(start));
            report.bytes_sent = measured * size as u64;
            Ok(report)
        }
        Role::Server => {
            let mut buf = vec![0u8; size];
            recv_messages(conn, &mut buf, 0, warmup)?;
            let start = Instant::now();
            let received = recv_messages(conn, &mut buf, warmup, measured)?;
            let elapsed = elapsed_ns(start);
            send_token(conn, point.message_count)?;
            let mut report = base_report(point, run_index, measured, elapsed);
            report.bytes_received = received;
            Ok(report)
        }
    }
}

/// One phase of simultaneous send and receive of `count` messages each way.
fn duplex_phase(
    conn: &Connection,
    size: usize,
    first_index: u64,
    count: u64,
    seed: u8,
) -> Result<(u64, u64), EngineError> {
    let (mut tx, mut rx) = conn.split().map_err(EngineError::transport(first_index))?;
    let start = Instant::now();
    let received = thread::scope(|s| {
        let sender = s.spawn(move || {
            let buf = payload_pattern(size, seed);
            send_messages(&mut tx, &buf, first_index, count)
        });
        let mut buf = vec![0u8; size];
        let received = recv_messages(&mut rx, &mut buf, first_index, count);
        let sent = sender.join().expect("sender thread panicked");
        sent.and(received)
    })?;
    Ok((elapsed_ns(start), received))
}

/// Both peers send and receive concurrently on two threads. The report
/// carries both directions' messages and the slower side's elapsed time.
pub fn run_bidirectional(
    conn: &mut Connection,
    point: SchedulePoint,
    config: &BenchmarkConfig,
    run_index: u32,
) -> Result<RunReport, EngineError> {
    let size = point.payload_size as usize;
    let warmup = config.effective_warmup(point.message_count);
    let measured = point.message_count - warmup;
    if warmup > 0 {
        duplex_phase(conn, size, 0, warmup, run_index as u8)?;
    }
    let (local, received) = duplex_phase(conn, size, warmup, measured, run_index as u8)?;

    let done = point.message_count;
    conn.send_blocking(&local.to_le_bytes())
        .map_err(EngineError::transport(done))?;
    let mut remote = [0u8; 8];
    conn.recv_into(&mut remote)
        .map_err(EngineError::transport(done))?;
    let remote = u64::from_le_bytes(remote);

    let mut report = base_report(point, run_index, 2 * measured, local.max(remote));
    report.bytes_sent = measured * size as u64;
    report.bytes_received = received;
    Ok(report)
}

/// The client times each blocking send call. Returning from a stream send
/// only means the kernel accepted the bytes, so samples are a lower bound on
/// delivery latency.
pub fn run_onesided_latency(
    conn: &mut Connection,
    point: SchedulePoint,
    config: &BenchmarkConfig,
    run_index: u32,
) -> Result<RunReport, EngineError> {
    let size = point.payload_size as usize;
    let warmup = config.effective_warmup(point.message_count);
    let measured = point.message_count - warmup;
    match conn.role() {
        Role::Client => {
            let buf = payload_pattern(size, run_index as u8);
            send_messages(conn, &buf, 0, warmup)?;
            let mut samples = LatencySamples::with_capacity(measured as usize);
            let start = Instant::now();
            for i in 0..measured {
                let t0 = Instant::now();
                conn.send_blocking(&buf)
                    .map_err(EngineError::transport(warmup + i))?;
                samples.record(t0.elapsed().as_nanos() as u64);
            }
            recv_token(conn, point.message_count)?;
            let mut report = base_report(point, run_index, measured, elapsed_ns(start));
            report.latency = Some(samples);
            report.bytes_sent = measured * size as u64;
            Ok(report)
        }
        Role::Server => {
            let mut buf = vec![0u8; size];
            recv_messages(conn, &mut buf, 0, warmup)?;
            let start = Instant::now();
            let received = recv_messages(conn, &mut buf, warmup, measured)?;
            let elapsed = elapsed_ns(start);
            send_token(conn, point.message_count)?;
            let mut report = base_report(point, run_index, measured, elapsed);
            report.bytes_received = received;
            Ok(report)
        }
    }
}

fn stamp(buf: &mut [u8], iteration: u64) {
    let bytes = iteration.to_le_bytes();
    let n = buf.len().min(bytes.len());
    buf[..n].copy_from_slice(&bytes[..n]);
}

/// Client sends a ping and blocks until the same-size pong is back; one RTT
/// sample per iteration. Every pong is compared with its ping.
pub fn run_pingpong(
    conn: &mut Connection,
    point: SchedulePoint,
    config: &BenchmarkConfig,
    run_index: u32,
) -> Result<RunReport, EngineError> {
    let size = point.payload_size as usize;
    let warmup = config.effective_warmup(point.message_count);
    let measured = point.message_count - warmup;
    match conn.role() {
        Role::Client => {
            let mut ping = payload_pattern(size, run_index as u8);
            let mut pong = vec![0u8; size];
            let mut samples = LatencySamples::with_capacity(measured as usize);
            let mut start = Instant::now();
            for i in 0..point.message_count {
                if i == warmup {
                    start = Instant::now();
                }
                stamp(&mut ping, i);
                let t0 = Instant::now();
                conn.send_blocking(&ping)
                    .map_err(EngineError::transport(i))?;
                conn.recv_into(&mut pong)
                    .map_err(EngineError::transport(i))?;
                let rtt = t0.elapsed().as_nanos() as u64;
                if pong != ping {
                    return Err(EngineError::EchoMismatch { iteration: i });
                }
                if i >= warmup {
                    samples.record(rtt);
                }
            }
            let mut report = base_report(point, run_index, measured, elapsed_ns(start));
            report.latency = Some(samples);
            report.bytes_sent = measured * size as u64;
            report.bytes_received = measured * size as u64;
            Ok(report)
        }
        Role::Server => {
            let mut buf = vec![0u8; size];
            let mut start = Instant::now();
            for i in 0..point.message_count {
                if i == warmup {
                    start = Instant::now();
                }
                conn.recv_into(&mut buf)
                    .map_err(EngineError::transport(i))?;
                conn.send_blocking(&buf)
                    .map_err(EngineError::transport(i))?;
            }
            let mut report = base_report(point, run_index, measured, elapsed_ns(start));
            report.bytes_sent = measured * size as u64;
            report.bytes_received = measured * size as u64;
            Ok(report)
        }
    }
}

/// Dispatches on the connection's negotiated mode.
pub fn run_point(
    conn: &mut Connection,
    point: SchedulePoint,
    config: &BenchmarkConfig,
    run_index: u32,
) -> Result<RunReport, EngineError> {
    match config.mode {
        Mode::Unidir => run_unidirectional(conn, point, config, run_index),
        Mode::Bidir => run_bidirectional(conn, point, config, run_index),
        Mode::Latency => run_onesided_latency(conn, point, config, run_index),
        Mode::Pingpong | Mode::Overhead => run_pingpong(conn, point, config, run_index),
    }
}
