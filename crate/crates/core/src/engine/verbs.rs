//! Benchmark patterns over a simulated queue pair pair.
//!
//! Each endpoint is run by a [`Driver`]: a non-blocking state machine that
//! posts, polls and reacts, reporting whether it did anything. Drivers are
//! scheduled either cooperatively on the calling thread or on one thread per
//! endpoint; both produce the same logical-time results.
//!
//! Throughput senders keep the send queue full: an initial fill up to the
//! queue depth, then, as soon as polling has freed room for another batch,
//! an immediate refill in batch-sized post calls.

use std::collections::BTreeMap;
use std::thread;

use bytes::Bytes;

use super::{payload_pattern, EngineError, RunReport};
use crate::schedule::{BenchmarkConfig, Mode, SchedulePoint};
use crate::simverbs::{
    create_queue_pair_pair, SimConfig, SimError, SimQueuePair, VerbsOp, WorkCompletion, WorkRequest,
};
use crate::stats::LatencySamples;

const POLL_BATCH: usize = 64;

/// Non-blocking per-endpoint benchmark logic.
pub trait Driver: Send {
    /// Does whatever is possible at the current simulated instant.
    /// Returns `true` if anything was posted or polled.
    fn turn(&mut self, qp: &SimQueuePair) -> Result<bool, EngineError>;

    fn done(&self) -> bool;
}

/// How the two endpoint drivers share the simulated clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduling {
    /// Both drivers interleaved on the calling thread.
    #[default]
    Cooperative,
    /// One thread per endpoint, synchronized through the simulator.
    Threaded,
}

fn check_ok(wc: &WorkCompletion) -> Result<(), EngineError> {
    if wc.is_ok() {
        Ok(())
    } else {
        Err(EngineError::Completion {
            op: wc.op,
            request_id: wc.request_id,
            status: wc.status,
        })
    }
}

/// Driver that never has work; stands in for a passive RDMA target.
#[derive(Debug, Default)]
pub struct Idle;

impl Driver for Idle {
    fn turn(&mut self, _qp: &SimQueuePair) -> Result<bool, EngineError> {
        Ok(false)
    }

    fn done(&self) -> bool {
        true
    }
}

/// Bookkeeping of a pacing sender.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PaceStats {
    pub elapsed_ns: u64,
    pub completions: u64,
    pub max_occupancy: usize,
    /// Times the send queue was found empty while messages remained.
    pub empty_detections: u64,
    /// Histogram of work requests per post call.
    pub post_sizes: BTreeMap<usize, u64>,
}

/// Throughput driver: optional pacing sender plus optional receiver that
/// keeps receive buffers posted.
#[derive(Debug)]
pub struct StreamDriver {
    op: VerbsOp,
    len: u64,
    send_total: u64,
    depth: usize,
    batch: usize,
    posted: u64,
    completed: u64,
    occupancy: usize,
    recv_total: u64,
    recv_depth: usize,
    recv_posted: u64,
    received: u64,
    next_id: u64,
    stats: PaceStats,
}

impl StreamDriver {
    pub fn new(len: u64) -> Self {
        StreamDriver {
            op: VerbsOp::Send,
            len,
            send_total: 0,
            depth: 1,
            batch: 1,
            posted: 0,
            completed: 0,
            occupancy: 0,
            recv_total: 0,
            recv_depth: 1,
            recv_posted: 0,
            received: 0,
            next_id: 0,
            stats: PaceStats::default(),
        }
    }

    pub fn sending(mut self, op: VerbsOp, total: u64, depth: usize, batch: usize) -> Self {
        assert!(
            depth >= 1 && batch >= 1 && batch <= depth,
            "invalid pacing parameters"
        );
        self.op = op;
        self.send_total = total;
        self.depth = depth;
        self.batch = batch;
        self
    }

    pub fn receiving(mut self, total: u64, recv_depth: usize) -> Self {
        self.recv_total = total;
        self.recv_depth = recv_depth.max(1);
        self
    }

    pub fn stats(&self) -> &PaceStats {
        &self.stats
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    fn fill(&mut self, qp: &SimQueuePair) -> Result<bool, EngineError> {
        let mut progressed = false;
        loop {
            let remaining = self.send_total - self.posted;
            let chunk = (self.batch as u64).min(remaining) as usize;
            if chunk == 0 || self.depth - self.occupancy < chunk {
                break;
            }
            let wrs = (0..chunk)
                .map(|_| {
                    self.next_id += 1;
                    WorkRequest::new(self.next_id, self.op, self.len)
                })
                .collect();
            qp.post_send_batch(wrs)?;
            self.posted += chunk as u64;
            self.occupancy += chunk;
            self.stats.max_occupancy = self.stats.max_occupancy.max(self.occupancy);
            *self.stats.post_sizes.entry(chunk).or_default() += 1;
            progressed = true;
        }
        Ok(progressed)
    }

    fn replenish_recvs(&mut self, qp: &SimQueuePair) -> Result<bool, EngineError> {
        let mut progressed = false;
        while self.recv_posted < self.recv_total
            && ((self.recv_posted - self.received) as usize) < self.recv_depth
        {
            self.next_id += 1;
            qp.post_recv(WorkRequest::recv(self.next_id, self.len))?;
            self.recv_posted += 1;
            progressed = true;
        }
        Ok(progressed)
    }
}

impl Driver for StreamDriver {
    fn turn(&mut self, qp: &SimQueuePair) -> Result<bool, EngineError> {
        let mut progressed = self.replenish_recvs(qp)?;
        progressed |= self.fill(qp)?;

        let wcs = qp.poll_cq(POLL_BATCH);
        progressed |= !wcs.is_empty();
        for wc in &wcs {
            check_ok(wc)?;
            if wc.op == VerbsOp::Recv {
                if wc.bytes != self.len {
                    return Err(EngineError::Protocol(format!(
                        "received {} bytes, expected {}",
                        wc.bytes, self.len
                    )));
                }
                self.received += 1;
            } else {
                self.completed += 1;
                self.occupancy -= 1;
                self.stats.completions += 1;
            }
        }

        // Refill right away so the queue never sits empty between polls.
        progressed |= self.fill(qp)?;
        progressed |= self.replenish_recvs(qp)?;

        if self.posted < self.send_total && self.occupancy == 0 {
            self.stats.empty_detections += 1;
        }
        Ok(progressed)
    }

    fn done(&self) -> bool {
        self.completed == self.send_total && self.received == self.recv_total
    }
}

/// Runs one driver per endpoint until both are done.
pub fn run_drivers(
    a: &SimQueuePair,
    b: &SimQueuePair,
    da: &mut dyn Driver,
    db: &mut dyn Driver,
    scheduling: Scheduling,
) -> Result<(), EngineError> {
    match scheduling {
        Scheduling::Cooperative => loop {
            let pa = if da.done() { false } else { da.turn(a)? };
            let pb = if db.done() { false } else { db.turn(b)? };
            if da.done() && db.done() {
                return Ok(());
            }
            if !pa && !pb {
                let now = a.now();
                a.step().ok_or(SimError::Stalled { now_ns: now })?;
            }
        },
        Scheduling::Threaded => {
            let guards = (a.join_context(), b.join_context());
            let drive = |qp: &SimQueuePair, d: &mut dyn Driver, guard| {
                let _guard = guard;
                while !d.done() {
                    if !d.turn(qp)? {
                        qp.wait_progress()?;
                    }
                }
                Ok::<(), EngineError>(())
            };
            thread::scope(|s| {
                let (ga, gb) = guards;
                let ha = s.spawn(|| drive(a, da, ga));
                let rb = drive(b, db, gb);
                let ra = ha.join().expect("driver thread panicked");
                ra.and(rb)
            })
        }
    }
}

/// Posts `total` requests of `op` keeping the send queue at `depth`, with
/// post calls of `batch` requests. Single context: the peer must not need
/// driving (RDMA ops, or receives already posted).
pub fn pace_send_queue(
    qp: &SimQueuePair,
    op: VerbsOp,
    len: u64,
    total: u64,
    depth: usize,
    batch: usize,
) -> Result<PaceStats, EngineError> {
    let mut driver = StreamDriver::new(len).sending(op, total, depth, batch);
    let start = qp.now();
    loop {
        let progressed = driver.turn(qp)?;
        if driver.done() {
            break;
        }
        if !progressed {
            let now = qp.now();
            qp.step().ok_or(SimError::Stalled { now_ns: now })?;
        }
    }
    let mut stats = driver.stats;
    stats.elapsed_ns = qp.now() - start;
    Ok(stats)
}

/// One outstanding request at a time, timed from post to polled completion.
#[derive(Debug)]
pub struct LatencyDriver {
    op: VerbsOp,
    len: u64,
    total: u64,
    warmup: u64,
    issued: u64,
    finished: u64,
    posted_at: Option<u64>,
    samples: LatencySamples,
}

impl LatencyDriver {
    pub fn new(op: VerbsOp, len: u64, total: u64, warmup: u64) -> Self {
        LatencyDriver {
            op,
            len,
            total,
            warmup,
            issued: 0,
            finished: 0,
            posted_at: None,
            samples: LatencySamples::with_capacity((total - warmup) as usize),
        }
    }

    pub fn into_samples(self) -> LatencySamples {
        self.samples
    }
}

impl Driver for LatencyDriver {
    fn turn(&mut self, qp: &SimQueuePair) -> Result<bool, EngineError> {
        let mut progressed = false;
        if self.posted_at.is_none() && self.issued < self.total {
            self.issued += 1;
            self.posted_at = Some(qp.now());
            qp.post_send(WorkRequest::new(self.issued, self.op, self.len))?;
            progressed = true;
        }
        for wc in qp.poll_cq(POLL_BATCH) {
            progressed = true;
            check_ok(&wc)?;
            let t0 = self.posted_at.take().ok_or_else(|| {
                EngineError::Protocol("completion without outstanding request".into())
            })?;
            if self.finished >= self.warmup {
                self.samples.record(qp.now() - t0);
            }
            self.finished += 1;
        }
        Ok(progressed)
    }

    fn done(&self) -> bool {
        self.finished == self.total
    }
}

/// Ping side of a ping-pong exchange; one RTT sample per iteration.
#[derive(Debug)]
pub struct PingDriver {
    ping: Bytes,
    total: u64,
    warmup: u64,
    iteration: u64,
    sent_at: Option<u64>,
    send_done: bool,
    pong_seen: bool,
    recv_posted: bool,
    samples: LatencySamples,
}

impl PingDriver {
    pub fn new(ping: Bytes, total: u64, warmup: u64) -> Self {
        PingDriver {
            ping,
            total,
            warmup,
            iteration: 0,
            sent_at: None,
            send_done: false,
            pong_seen: false,
            recv_posted: false,
            samples: LatencySamples::with_capacity((total - warmup) as usize),
        }
    }

    pub fn into_samples(self) -> LatencySamples {
        self.samples
    }
}

impl Driver for PingDriver {
    fn turn(&mut self, qp: &SimQueuePair) -> Result<bool, EngineError> {
        let mut progressed = false;
        if self.sent_at.is_none() && self.iteration < self.total {
            if !self.recv_posted {
                qp.post_recv(WorkRequest::recv(self.iteration, self.ping.len() as u64))?;
                self.recv_posted = true;
            }
            self.sent_at = Some(qp.now());
            qp.post_send(WorkRequest::send_data(self.iteration, self.ping.clone()))?;
            progressed = true;
        }
        for wc in qp.poll_cq(POLL_BATCH) {
            progressed = true;
            check_ok(&wc)?;
            if wc.op == VerbsOp::Recv {
                if wc.data != self.ping {
                    return Err(EngineError::EchoMismatch {
                        iteration: self.iteration,
                    });
                }
                self.pong_seen = true;
                self.recv_posted = false;
                if self.iteration >= self.warmup {
                    let t0 = self.sent_at.expect("pong before ping");
                    self.samples.record(qp.now() - t0);
                }
            } else {
                self.send_done = true;
            }
        }
        if self.send_done && self.pong_seen {
            self.iteration += 1;
            self.sent_at = None;
            self.send_done = false;
            self.pong_seen = false;
        }
        Ok(progressed)
    }

    fn done(&self) -> bool {
        self.iteration == self.total
    }
}

/// Echo side of a ping-pong exchange.
#[derive(Debug)]
pub struct PongDriver {
    len: u64,
    total: u64,
    received: u64,
    echoed: u64,
    recv_posted: bool,
    pending_echo: Option<Bytes>,
    in_flight: bool,
}

impl PongDriver {
    pub fn new(len: u64, total: u64) -> Self {
        PongDriver {
            len,
            total,
            received: 0,
            echoed: 0,
            recv_posted: false,
            pending_echo: None,
            in_flight: false,
        }
    }
}

impl Driver for PongDriver {
    fn turn(&mut self, qp: &SimQueuePair) -> Result<bool, EngineError> {
        let mut progressed = false;
        if !self.recv_posted && self.received < self.total {
            qp.post_recv(WorkRequest::recv(self.received, self.len))?;
            self.recv_posted = true;
            progressed = true;
        }
        for wc in qp.poll_cq(POLL_BATCH) {
            progressed = true;
            check_ok(&wc)?;
            if wc.op == VerbsOp::Recv {
                if wc.bytes != self.len {
                    return Err(EngineError::Protocol(format!(
                        "ping of {} bytes, expected {}",
                        wc.bytes, self.len
                    )));
                }
                self.received += 1;
                self.recv_posted = false;
                self.pending_echo = Some(wc.data);
            } else {
                self.in_flight = false;
                self.echoed += 1;
            }
        }
        if !self.recv_posted && self.received < self.total {
            qp.post_recv(WorkRequest::recv(self.received, self.len))?;
            self.recv_posted = true;
            progressed = true;
        }
        if !self.in_flight {
            if let Some(data) = self.pending_echo.take() {
                let wr = if data.is_empty() {
                    WorkRequest::send(self.echoed, self.len)
                } else {
                    WorkRequest::send_data(self.echoed, data)
                };
                qp.post_send(wr)?;
                self.in_flight = true;
                progressed = true;
            }
        }
        Ok(progressed)
    }

    fn done(&self) -> bool {
        self.echoed == self.total
    }
}

/// A connected simulated pair plus the settings for running points on it.
pub struct VerbsBench {
    pub client: SimQueuePair,
    pub server: SimQueuePair,
    op: VerbsOp,
    depth: usize,
    batch: usize,
    scheduling: Scheduling,
}

impl VerbsBench {
    pub fn new(config: &BenchmarkConfig, scheduling: Scheduling) -> Result<Self, EngineError> {
        Self::with_sim_config(config, SimConfig::from_benchmark(config), scheduling)
    }

    pub fn with_sim_config(
        config: &BenchmarkConfig,
        sim: SimConfig,
        scheduling: Scheduling,
    ) -> Result<Self, EngineError> {
        let op = VerbsOp::for_kind(config.transport)
            .ok_or_else(|| EngineError::Unsupported(config.transport.to_string()))?;
        let (client, server) = create_queue_pair_pair(sim);
        Ok(VerbsBench {
            client,
            server,
            op,
            depth: config.queue_depth,
            batch: config.post_batch,
            scheduling,
        })
    }

    fn wire_snapshot(&self) -> (u64, u64) {
        let a = self.client.counters();
        let b = self.server.counters();
        (
            a.port_xmit_data + b.port_xmit_data,
            a.rnr_nak_retry_err + b.rnr_nak_retry_err,
        )
    }

    fn run(&self, da: &mut dyn Driver, db: &mut dyn Driver) -> Result<(), EngineError> {
        run_drivers(&self.client, &self.server, da, db, self.scheduling)
    }

    /// Wraps the logical elapsed time and counter deltas of `measure` into a
    /// report.
    fn measured<F>(
        &self,
        point: SchedulePoint,
        run_index: u32,
        measure: F,
    ) -> Result<RunReport, EngineError>
    where
        F: FnOnce(&Self) -> Result<(u64, Option<LatencySamples>, u64, u64), EngineError>,
    {
        let (wire0, rnr0) = self.wire_snapshot();
        let start = self.client.now();
        let (messages, latency, sent, received) = measure(self)?;
        let elapsed = (self.client.now() - start).max(1);
        let (wire1, rnr1) = self.wire_snapshot();
        Ok(RunReport {
            payload_size: point.payload_size,
            run_index,
            messages,
            elapsed_ns: elapsed,
            latency,
            wire_bytes: Some(wire1 - wire0),
            rnr_naks: Some(rnr1 - rnr0),
            bytes_sent: sent,
            bytes_received: received,
        })
    }

    fn unidir_phase(&self, len: u64, count: u64) -> Result<u64, EngineError> {
        let mut sender = StreamDriver::new(len).sending(self.op, count, self.depth, self.batch);
        if self.op == VerbsOp::Send {
            let mut receiver = StreamDriver::new(len).receiving(count, self.depth);
            self.run(&mut sender, &mut receiver)?;
            Ok(receiver.received() * len)
        } else {
            self.run(&mut sender, &mut Idle)?;
            Ok(count * len)
        }
    }

    pub fn run_unidirectional(
        &self,
        point: SchedulePoint,
        config: &BenchmarkConfig,
        run_index: u32,
    ) -> Result<RunReport, EngineError> {
        let len = point.payload_size;
        let warmup = config.effective_warmup(point.message_count);
        let measured = point.message_count - warmup;
        if warmup > 0 {
            self.unidir_phase(len, warmup)?;
        }
        self.measured(point, run_index, |b| {
            let delivered = b.unidir_phase(len, measured)?;
            Ok((measured, None, measured * len, delivered))
        })
    }

    fn bidir_phase(&self, len: u64, count: u64) -> Result<u64, EngineError> {
        let recv_count = if self.op == VerbsOp::Send { count } else { 0 };
        let mut a = StreamDriver::new(len)
            .sending(self.op, count, self.depth, self.batch)
            .receiving(recv_count, self.depth);
        let mut b = StreamDriver::new(len)
            .sending(self.op, count, self.depth, self.batch)
            .receiving(recv_count, self.depth);
        self.run(&mut a, &mut b)?;
        Ok(if self.op == VerbsOp::Send {
            a.received() * len
        } else {
            count * len
        })
    }

    pub fn run_bidirectional(
        &self,
        point: SchedulePoint,
        config: &BenchmarkConfig,
        run_index: u32,
    ) -> Result<RunReport, EngineError> {
        let len = point.payload_size;
        let warmup = config.effective_warmup(point.message_count);
        let measured = point.message_count - warmup;
        if warmup > 0 {
            self.bidir_phase(len, warmup)?;
        }
        self.measured(point, run_index, |b| {
            let received = b.bidir_phase(len, measured)?;
            Ok((2 * measured, None, measured * len, received))
        })
    }

    pub fn run_onesided_latency(
        &self,
        point: SchedulePoint,
        config: &BenchmarkConfig,
        run_index: u32,
    ) -> Result<RunReport, EngineError> {
        let len = point.payload_size;
        let total = point.message_count;
        let warmup = config.effective_warmup(total);
        self.measured(point, run_index, |b| {
            let mut client = LatencyDriver::new(b.op, len, total, warmup);
            if b.op == VerbsOp::Send {
                let mut receiver = StreamDriver::new(len).receiving(total, 1);
                b.run(&mut client, &mut receiver)?;
            } else {
                b.run(&mut client, &mut Idle)?;
            }
            let measured = total - warmup;
            Ok((measured, Some(client.into_samples()), measured * len, 0))
        })
    }

    pub fn run_pingpong(
        &self,
        point: SchedulePoint,
        config: &BenchmarkConfig,
        run_index: u32,
    ) -> Result<RunReport, EngineError> {
        if self.op != VerbsOp::Send {
            return Err(EngineError::Unsupported(format!(
                "ping-pong over {:?}",
                self.op
            )));
        }
        let len = point.payload_size;
        let warmup = config.effective_warmup(point.message_count);
        let measured = point.message_count - warmup;
        let ping = Bytes::from(payload_pattern(len as usize, run_index as u8));
        if warmup > 0 {
            let mut client = PingDriver::new(ping.clone(), warmup, 0);
            let mut server = PongDriver::new(len, warmup);
            self.run(&mut client, &mut server)?;
        }
        self.measured(point, run_index, |b| {
            let mut client = PingDriver::new(ping, measured, 0);
            let mut server = PongDriver::new(len, measured);
            b.run(&mut client, &mut server)?;
            let samples = client.into_samples();
            Ok((measured, Some(samples), measured * len, measured * len))
        })
    }

    pub fn run_point(
        &self,
        point: SchedulePoint,
        config: &BenchmarkConfig,
        run_index: u32,
    ) -> Result<RunReport, EngineError> {
        match config.mode {
            Mode::Unidir => self.run_unidirectional(point, config, run_index),
            Mode::Bidir => self.run_bidirectional(point, config, run_index),
            Mode::Latency => self.run_onesided_latency(point, config, run_index),
            Mode::Pingpong | Mode::Overhead => self.run_pingpong(point, config, run_index),
        }
    }
}
