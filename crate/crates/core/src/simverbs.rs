//! In-process simulation of a pair of connected RC queue pairs.
//!
//! Each endpoint has a bounded send queue, a bounded receive queue and a
//! completion queue. Messages travel over one simulated link per direction:
//! a link serializes transmissions (`per_message_ns` plus a per-byte cost)
//! and adds a fixed one-way latency. Time is a logical nanosecond clock that
//! only moves when a driver asks for progress, so every run is reproducible.
//! An RDMA READ sends a payload-free request and gets its data back over the
//! responder's link, so it costs two one-way latencies.
//!
//! Wire accounting mirrors the HCA `port_xmit_data` counter: every delivery
//! attempt charges payload plus per-packet headers from [`crate::overhead`].
//! A SEND that reaches an endpoint with no receive posted is answered with an
//! RNR NAK. The requester then backs off for `rnr_delay_ns` and retransmits
//! it, together with every later message that was already in flight on that
//! link (they are dropped by the responder as out of sequence and never
//! charged). Once a request has been NAK'd more than `rnr_retry_limit` times
//! it completes with [`CompletionStatus::RnrRetryExceeded`].
//!
//! Send queue slots are held from `post_send` until the matching completion is
//! returned by `poll_cq`, which is the occupancy an application can observe.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bytes::Bytes;
use thiserror::Error;

use crate::overhead::{self, TransportKind};
use crate::schedule::BenchmarkConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("send queue full ({depth} outstanding)")]
    SendQueueFull { depth: usize },
    #[error("receive queue full ({depth} posted)")]
    RecvQueueFull { depth: usize },
    #[error("{0:?} cannot be posted to this queue")]
    WrongQueue(VerbsOp),
    #[error("work request id {0} is already outstanding")]
    DuplicateId(u64),
    #[error("simulation stalled at t={now_ns} ns: no pending events")]
    Stalled { now_ns: u64 },
    #[error("no simulated progress for {0:?}")]
    Watchdog(Duration),
    #[error("unknown counter `{0}`")]
    UnknownCounter(String),
}

/// Per-direction link model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkTiming {
    pub one_way_latency_ns: u64,
    pub per_message_ns: u64,
    /// Serialization cost per wire byte in picoseconds (80 ps is 100 Gbit/s).
    pub per_byte_ps: u64,
}

impl Default for LinkTiming {
    fn default() -> Self {
        LinkTiming {
            one_way_latency_ns: 1_000,
            per_message_ns: 100,
            per_byte_ps: 80,
        }
    }
}

impl LinkTiming {
    /// Pure propagation delay with free serialization.
    pub fn latency_only(one_way_latency_ns: u64) -> Self {
        LinkTiming {
            one_way_latency_ns,
            per_message_ns: 0,
            per_byte_ps: 0,
        }
    }

    pub fn service_ns(&self, wire_bytes: u64) -> u64 {
        let bytes_ns = (wire_bytes as u128 * self.per_byte_ps as u128) / 1000;
        self.per_message_ns + bytes_ns as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub send_depth: usize,
    pub recv_depth: usize,
    pub mtu: u64,
    pub rnr_delay_ns: u64,
    pub rnr_retry_limit: u32,
    pub timing: LinkTiming,
    pub record_deliveries: bool,
    pub watchdog: Duration,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            send_depth: crate::schedule::DEFAULT_QUEUE_DEPTH,
            recv_depth: crate::schedule::DEFAULT_QUEUE_DEPTH,
            mtu: crate::schedule::DEFAULT_MTU,
            rnr_delay_ns: crate::schedule::DEFAULT_RNR_DELAY_US * 1000,
            rnr_retry_limit: crate::schedule::DEFAULT_RNR_RETRY_LIMIT,
            timing: LinkTiming::default(),
            record_deliveries: false,
            watchdog: Duration::from_secs(60),
        }
    }
}

impl SimConfig {
    pub fn from_benchmark(config: &BenchmarkConfig) -> Self {
        SimConfig {
            send_depth: config.queue_depth,
            recv_depth: config.queue_depth,
            mtu: config.mtu,
            rnr_delay_ns: config.rnr_delay_us * 1000,
            rnr_retry_limit: config.rnr_retry_limit,
            timing: config.sim_timing,
            record_deliveries: false,
            watchdog: config.progress_timeout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerbsOp {
    Send,
    RdmaWrite,
    RdmaRead,
    Recv,
}

impl VerbsOp {
    pub fn wire_kind(self) -> Option<TransportKind> {
        match self {
            VerbsOp::Send => Some(TransportKind::RcMsg),
            VerbsOp::RdmaWrite => Some(TransportKind::RcRdmaWrite),
            VerbsOp::RdmaRead => Some(TransportKind::RcRdmaRead),
            VerbsOp::Recv => None,
        }
    }

    /// Requester-side op for a runnable transport kind.
    pub fn for_kind(kind: TransportKind) -> Option<VerbsOp> {
        match kind {
            TransportKind::RcMsg => Some(VerbsOp::Send),
            TransportKind::RcRdmaWrite => Some(VerbsOp::RdmaWrite),
            TransportKind::RcRdmaRead => Some(VerbsOp::RdmaRead),
            _ => None,
        }
    }
}

/// A work request. `data` is optional: when empty, `len` bytes are accounted
/// for without carrying content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkRequest {
    pub id: u64,
    pub op: VerbsOp,
    pub len: u64,
    pub data: Bytes,
}

impl WorkRequest {
    pub fn new(id: u64, op: VerbsOp, len: u64) -> Self {
        WorkRequest {
            id,
            op,
            len,
            data: Bytes::new(),
        }
    }

    pub fn send(id: u64, len: u64) -> Self {
        Self::new(id, VerbsOp::Send, len)
    }

    pub fn send_data(id: u64, data: Bytes) -> Self {
        WorkRequest {
            id,
            op: VerbsOp::Send,
            len: data.len() as u64,
            data,
        }
    }

    pub fn rdma_write(id: u64, len: u64) -> Self {
        Self::new(id, VerbsOp::RdmaWrite, len)
    }

    pub fn rdma_read(id: u64, len: u64) -> Self {
        Self::new(id, VerbsOp::RdmaRead, len)
    }

    /// Receive buffer of `capacity` bytes.
    pub fn recv(id: u64, capacity: u64) -> Self {
        Self::new(id, VerbsOp::Recv, capacity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionStatus {
    Ok,
    RnrRetryExceeded,
    /// Incoming message larger than the receive buffer.
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkCompletion {
    pub request_id: u64,
    pub op: VerbsOp,
    pub status: CompletionStatus,
    pub bytes: u64,
    /// Received content for receive completions, when the sender carried any.
    pub data: Bytes,
    pub time_ns: u64,
}

impl WorkCompletion {
    pub fn is_ok(&self) -> bool {
        self.status == CompletionStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSet {
    /// Bytes transmitted by this port, headers and retransmissions included.
    pub port_xmit_data: u64,
    /// Send requests that were answered with at least one RNR NAK.
    pub rnr_nak_retry_err: u64,
    /// Requester-side work requests completed successfully.
    pub messages_completed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterId {
    PortXmitData,
    RnrNakRetryErr,
    MessagesCompleted,
}

impl FromStr for CounterId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "port_xmit_data" => Ok(CounterId::PortXmitData),
            "rnr_nak_retry_err" => Ok(CounterId::RnrNakRetryErr),
            "messages_completed" => Ok(CounterId::MessagesCompleted),
            other => Err(SimError::UnknownCounter(other.to_string())),
        }
    }
}

impl CounterSet {
    pub fn get(&self, id: CounterId) -> u64 {
        match id {
            CounterId::PortXmitData => self.port_xmit_data,
            CounterId::RnrNakRetryErr => self.rnr_nak_retry_err,
            CounterId::MessagesCompleted => self.messages_completed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    A,
    B,
}

impl Side {
    fn index(self) -> usize {
        match self {
            Side::A => 0,
            Side::B => 1,
        }
    }

    pub fn peer(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Delivered,
    RnrNak,
    LengthError,
}

/// One delivery attempt as seen at the responder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub time_ns: u64,
    pub from: Side,
    pub op: VerbsOp,
    pub request_id: u64,
    pub bytes: u64,
    pub wire_bytes: u64,
    pub outcome: DeliveryOutcome,
}

#[derive(Debug)]
struct Outbound {
    id: u64,
    op: VerbsOp,
    len: u64,
    data: Bytes,
    wire_bytes: u64,
    naks: u32,
}

#[derive(Debug)]
struct InFlight {
    attempt: u64,
    msg: Outbound,
}

#[derive(Debug, Default)]
struct Link {
    waiting: VecDeque<Outbound>,
    in_flight: VecDeque<InFlight>,
    free_at: u64,
}

#[derive(Debug)]
struct RecvSlot {
    id: u64,
    capacity: u64,
}

#[derive(Debug, Default)]
struct Endpoint {
    /// Posted sends whose completion has not been polled.
    send_occupancy: usize,
    /// Posted sends whose completion has not been generated.
    unfinished: usize,
    active_ids: HashSet<u64>,
    recv_queue: VecDeque<RecvSlot>,
    cq: VecDeque<WorkCompletion>,
    counters: CounterSet,
    link: Link,
    rnr_marked: HashSet<u64>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    seq: u64,
    from: usize,
    attempt: u64,
    /// Read response travelling back to `from`, keyed by `attempt`.
    read_response: bool,
}

#[derive(Debug)]
struct FabricState {
    config: SimConfig,
    now: u64,
    seq: u64,
    events: BinaryHeap<Reverse<Event>>,
    ends: [Endpoint; 2],
    read_responses: HashMap<u64, Outbound>,
    log: Vec<Delivery>,
    participants: usize,
    idle: usize,
    epoch: u64,
    last_step_stalled: bool,
}

struct Fabric {
    state: Mutex<FabricState>,
    progress: Condvar,
}

impl FabricState {
    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// Schedules transmissions for every waiting message on `from`'s link.
    fn pump(&mut self, from: usize) {
        let now = self.now;
        let timing = self.config.timing;
        while let Some(msg) = self.ends[from].link.waiting.pop_front() {
            let start = now.max(self.ends[from].link.free_at);
            // A read request carries no payload; the data comes back later.
            let request_bytes = if msg.op == VerbsOp::RdmaRead {
                0
            } else {
                msg.wire_bytes
            };
            let tx_done = start + timing.service_ns(request_bytes);
            self.ends[from].link.free_at = tx_done;
            let attempt = self.next_seq();
            let seq = self.next_seq();
            self.events.push(Reverse(Event {
                time: tx_done + timing.one_way_latency_ns,
                seq,
                from,
                attempt,
                read_response: false,
            }));
            self.ends[from]
                .link
                .in_flight
                .push_back(InFlight { attempt, msg });
        }
    }

    fn complete_requester(&mut self, side: usize, msg: &Outbound, status: CompletionStatus) {
        let now = self.now;
        let end = &mut self.ends[side];
        end.unfinished -= 1;
        if status == CompletionStatus::Ok {
            end.counters.messages_completed += 1;
        }
        end.rnr_marked.remove(&msg.id);
        end.cq.push_back(WorkCompletion {
            request_id: msg.id,
            op: msg.op,
            status,
            bytes: if status == CompletionStatus::Ok {
                msg.len
            } else {
                0
            },
            data: Bytes::new(),
            time_ns: now,
        });
    }

    fn log(&mut self, from: usize, msg: &Outbound, outcome: DeliveryOutcome) {
        if self.config.record_deliveries {
            self.log.push(Delivery {
                time_ns: self.now,
                from: if from == 0 { Side::A } else { Side::B },
                op: msg.op,
                request_id: msg.id,
                bytes: msg.len,
                wire_bytes: msg.wire_bytes,
                outcome,
            });
        }
    }

    fn arrive(&mut self, from: usize, attempt: u64) {
        let front_matches = self.ends[from]
            .link
            .in_flight
            .front()
            .is_some_and(|f| f.attempt == attempt);
        if !front_matches {
            // Rewound by an earlier RNR NAK.
            return;
        }
        let InFlight { msg, .. } = self.ends[from].link.in_flight.pop_front().unwrap();
        let to = 1 - from;

        if msg.op == VerbsOp::RdmaRead {
            self.serve_read(to, msg);
            return;
        }
        self.ends[from].counters.port_xmit_data += msg.wire_bytes;

        if msg.op != VerbsOp::Send {
            self.log(from, &msg, DeliveryOutcome::Delivered);
            self.complete_requester(from, &msg, CompletionStatus::Ok);
            return;
        }

        match self.ends[to].recv_queue.pop_front() {
            Some(slot) if slot.capacity >= msg.len => {
                self.log(from, &msg, DeliveryOutcome::Delivered);
                let now = self.now;
                self.ends[to].cq.push_back(WorkCompletion {
                    request_id: slot.id,
                    op: VerbsOp::Recv,
                    status: CompletionStatus::Ok,
                    bytes: msg.len,
                    data: msg.data.clone(),
                    time_ns: now,
                });
                self.complete_requester(from, &msg, CompletionStatus::Ok);
            }
            Some(slot) => {
                self.log(from, &msg, DeliveryOutcome::LengthError);
                let now = self.now;
                self.ends[to].cq.push_back(WorkCompletion {
                    request_id: slot.id,
                    op: VerbsOp::Recv,
                    status: CompletionStatus::Error,
                    bytes: 0,
                    data: Bytes::new(),
                    time_ns: now,
                });
                self.complete_requester(from, &msg, CompletionStatus::Error);
            }
            None => self.rnr_nak(from, msg),
        }
    }

    /// Puts the read data on the responder's link, back to the requester.
    fn serve_read(&mut self, responder: usize, msg: Outbound) {
        let timing = self.config.timing;
        let link = &mut self.ends[responder].link;
        let start = self.now.max(link.free_at);
        let tx_done = start + timing.service_ns(msg.wire_bytes);
        link.free_at = tx_done;
        let key = self.next_seq();
        let seq = self.next_seq();
        self.events.push(Reverse(Event {
            time: tx_done + timing.one_way_latency_ns,
            seq,
            from: 1 - responder,
            attempt: key,
            read_response: true,
        }));
        self.read_responses.insert(key, msg);
    }

    fn read_returned(&mut self, requester: usize, key: u64) {
        let msg = self
            .read_responses
            .remove(&key)
            .expect("read response without request");
        // Read data is transmitted by the responder's port.
        self.ends[1 - requester].counters.port_xmit_data += msg.wire_bytes;
        self.log(requester, &msg, DeliveryOutcome::Delivered);
        self.complete_requester(requester, &msg, CompletionStatus::Ok);
    }

    fn dispatch(&mut self, e: Event) {
        if e.read_response {
            self.read_returned(e.from, e.attempt);
        } else {
            self.arrive(e.from, e.attempt);
        }
    }

    fn rnr_nak(&mut self, from: usize, mut msg: Outbound) {
        self.log(from, &msg, DeliveryOutcome::RnrNak);
        let end = &mut self.ends[from];
        if end.rnr_marked.insert(msg.id) {
            end.counters.rnr_nak_retry_err += 1;
        }
        msg.naks += 1;

        // Later messages already on the wire go back in order behind the
        // NAK'd one; their pending arrival events become stale.
        let rewound: Vec<Outbound> = end.link.in_flight.drain(..).map(|f| f.msg).collect();
        for m in rewound.into_iter().rev() {
            end.link.waiting.push_front(m);
        }
        end.link.free_at = self.now + self.config.rnr_delay_ns;

        if msg.naks > self.config.rnr_retry_limit {
            self.complete_requester(from, &msg, CompletionStatus::RnrRetryExceeded);
        } else {
            self.ends[from].link.waiting.push_front(msg);
        }
        self.pump(from);
    }

    /// Processes every event at the earliest pending time. Returns that time,
    /// or `None` if nothing is scheduled.
    fn step(&mut self) -> Option<u64> {
        let Reverse(first) = self.events.pop()?;
        self.now = self.now.max(first.time);
        let tick = first.time;
        self.dispatch(first);
        while self.events.peek().is_some_and(|Reverse(e)| e.time == tick) {
            let Reverse(e) = self.events.pop().unwrap();
            self.dispatch(e);
        }
        Some(tick)
    }

    fn run_until(&mut self, time: u64) {
        while self.events.peek().is_some_and(|Reverse(e)| e.time <= time) {
            self.step();
        }
        self.now = self.now.max(time);
    }

    fn wire_bytes(&self, op: VerbsOp, len: u64) -> u64 {
        let kind = op.wire_kind().expect("requester op");
        overhead::per_message_wire_bytes(kind, len, self.config.mtu)
            .expect("RC kinds have a framing model")
    }
}

/// One endpoint of a simulated connected pair. Owned by a single context.
pub struct SimQueuePair {
    fabric: Arc<Fabric>,
    side: Side,
}

impl fmt::Debug for SimQueuePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimQueuePair")
            .field("side", &self.side)
            .finish()
    }
}

/// Creates two linked endpoints with empty queues and zeroed counters.
pub fn create_queue_pair_pair(config: SimConfig) -> (SimQueuePair, SimQueuePair) {
    let fabric = Arc::new(Fabric {
        state: Mutex::new(FabricState {
            config,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            ends: [Endpoint::default(), Endpoint::default()],
            read_responses: HashMap::new(),
            log: Vec::new(),
            participants: 0,
            idle: 0,
            epoch: 0,
            last_step_stalled: false,
        }),
        progress: Condvar::new(),
    });
    (
        SimQueuePair {
            fabric: Arc::clone(&fabric),
            side: Side::A,
        },
        SimQueuePair {
            fabric,
            side: Side::B,
        },
    )
}

impl SimQueuePair {
    fn lock(&self) -> MutexGuard<'_, FabricState> {
        self.fabric.state.lock().expect("simulator state poisoned")
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn mtu(&self) -> u64 {
        self.lock().config.mtu
    }

    pub fn config(&self) -> SimConfig {
        self.lock().config.clone()
    }

    /// Current logical time in nanoseconds.
    pub fn now(&self) -> u64 {
        self.lock().now
    }

    pub fn post_send(&self, wr: WorkRequest) -> Result<(), SimError> {
        self.post_send_batch(vec![wr])
    }

    /// Posts several requests in one call; either all are accepted or none.
    pub fn post_send_batch(&self, wrs: Vec<WorkRequest>) -> Result<(), SimError> {
        let mut st = self.lock();
        let me = self.side.index();
        let depth = st.config.send_depth;
        if st.ends[me].send_occupancy + wrs.len() > depth {
            return Err(SimError::SendQueueFull { depth });
        }
        let mut batch_ids = HashSet::with_capacity(wrs.len());
        for wr in &wrs {
            if wr.op == VerbsOp::Recv {
                return Err(SimError::WrongQueue(wr.op));
            }
            if st.ends[me].active_ids.contains(&wr.id) || !batch_ids.insert(wr.id) {
                return Err(SimError::DuplicateId(wr.id));
            }
        }
        for wr in wrs {
            let wire_bytes = st.wire_bytes(wr.op, wr.len);
            let end = &mut st.ends[me];
            end.send_occupancy += 1;
            end.unfinished += 1;
            end.active_ids.insert(wr.id);
            end.link.waiting.push_back(Outbound {
                id: wr.id,
                op: wr.op,
                len: wr.len,
                data: wr.data,
                wire_bytes,
                naks: 0,
            });
        }
        st.pump(me);
        Ok(())
    }

    pub fn post_recv(&self, wr: WorkRequest) -> Result<(), SimError> {
        if wr.op != VerbsOp::Recv {
            return Err(SimError::WrongQueue(wr.op));
        }
        let mut st = self.lock();
        let me = self.side.index();
        let depth = st.config.recv_depth;
        if st.ends[me].recv_queue.len() >= depth {
            return Err(SimError::RecvQueueFull { depth });
        }
        st.ends[me].recv_queue.push_back(RecvSlot {
            id: wr.id,
            capacity: wr.len,
        });
        Ok(())
    }

    /// Non-blocking: returns up to `max` completions in completion order.
    pub fn poll_cq(&self, max: usize) -> Vec<WorkCompletion> {
        let mut st = self.lock();
        let end = &mut st.ends[self.side.index()];
        let n = max.min(end.cq.len());
        let polled: Vec<WorkCompletion> = end.cq.drain(..n).collect();
        for wc in &polled {
            if wc.op != VerbsOp::Recv {
                end.send_occupancy -= 1;
                end.active_ids.remove(&wc.request_id);
            }
        }
        polled
    }

    pub fn read_counter(&self, name: &str) -> Result<u64, SimError> {
        let id: CounterId = name.parse()?;
        Ok(self.counters().get(id))
    }

    pub fn counters(&self) -> CounterSet {
        self.lock().ends[self.side.index()].counters
    }

    /// Send slots held by the application (posted, completion not polled).
    pub fn send_occupancy(&self) -> usize {
        self.lock().ends[self.side.index()].send_occupancy
    }

    /// Sends the simulated HCA has not finished yet.
    pub fn hw_outstanding(&self) -> usize {
        self.lock().ends[self.side.index()].unfinished
    }

    pub fn posted_recvs(&self) -> usize {
        self.lock().ends[self.side.index()].recv_queue.len()
    }

    pub fn has_pending_events(&self) -> bool {
        !self.lock().events.is_empty()
    }

    /// Single-context progress: processes the next tick of events.
    pub fn step(&self) -> Option<u64> {
        self.lock().step()
    }

    /// Processes every event up to and including `time`, then sets the clock.
    pub fn run_until(&self, time: u64) {
        self.lock().run_until(time)
    }

    pub fn delivery_log(&self) -> Vec<Delivery> {
        self.lock().log.clone()
    }

    /// Registers the calling context for [`SimQueuePair::wait_progress`].
    /// Register every context before any of them starts waiting.
    pub fn join_context(&self) -> ContextGuard {
        self.lock().participants += 1;
        ContextGuard {
            fabric: Arc::clone(&self.fabric),
        }
    }

    /// Multi-context progress. The clock advances only once every registered
    /// context is waiting, so no context observes time moving while another
    /// still has work to do at the current instant.
    pub fn wait_progress(&self) -> Result<(), SimError> {
        let mut st = self.lock();
        st.idle += 1;
        if st.idle >= st.participants.max(1) {
            return advance_locked(&self.fabric, &mut st);
        }
        let epoch = st.epoch;
        let watchdog = st.config.watchdog;
        let deadline = Instant::now() + watchdog;
        while st.epoch == epoch {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                st.idle -= 1;
                return Err(SimError::Watchdog(watchdog));
            }
            st = self
                .fabric
                .progress
                .wait_timeout(st, left)
                .expect("simulator state poisoned")
                .0;
        }
        if st.last_step_stalled {
            Err(SimError::Stalled { now_ns: st.now })
        } else {
            Ok(())
        }
    }
}

fn advance_locked(fabric: &Fabric, st: &mut FabricState) -> Result<(), SimError> {
    st.idle = 0;
    st.epoch += 1;
    let stepped = st.step();
    st.last_step_stalled = stepped.is_none();
    fabric.progress.notify_all();
    match stepped {
        Some(_) => Ok(()),
        None => Err(SimError::Stalled { now_ns: st.now }),
    }
}

/// Deregisters a context on drop, releasing contexts that were waiting on it.
pub struct ContextGuard {
    fabric: Arc<Fabric>,
}

impl Drop for ContextGuard {
    fn drop(&mut self) {
        let Ok(mut st) = self.fabric.state.lock() else {
            return;
        };
        st.participants = st.participants.saturating_sub(1);
        if st.idle > 0 && st.idle >= st.participants {
            let _ = advance_locked(&self.fabric, &mut st);
        }
    }
}
