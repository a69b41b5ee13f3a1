//! Blocking byte transport contract and its TCP implementation.
//!
//! Every connection starts with an 18-byte parameter frame exchanged in both
//! directions (client first). Layout, little-endian:
//!
//! | bytes  | field                     |
//! |--------|---------------------------|
//! | 0..4   | magic `WBJ1`              |
//! | 4      | version (1)               |
//! | 5      | mode ordinal              |
//! | 6..10  | payload size (u32)        |
//! | 10..18 | message count (u64)       |
//!
//! Both peers compare the frames and refuse to continue on any difference.
//! The same frame is re-sent on an established connection before each
//! schedule point.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::schedule::{BenchmarkConfig, Mode, Role, SchedulePoint};

pub const HANDSHAKE_MAGIC: [u8; 4] = *b"WBJ1";
pub const HANDSHAKE_VERSION: u8 = 1;
pub const HANDSHAKE_LEN: usize = 18;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot resolve `{0}`")]
    Resolve(String),
    #[error("bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("connect {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("timed out {0}")]
    Timeout(&'static str),
    #[error("not a wirebench peer")]
    NotAPeer,
    #[error("unsupported handshake version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown mode ordinal {0}")]
    UnknownMode(u8),
    #[error("{field} mismatch (local {local}, remote {remote})")]
    Mismatch {
        field: &'static str,
        local: String,
        remote: String,
    },
    #[error("connection closed after {received} of {expected} bytes")]
    Truncated { expected: usize, received: usize },
    #[error("connection closed by peer")]
    Closed,
    #[error("transport I/O: {0}")]
    Io(#[from] io::Error),
}

impl TransportError {
    fn from_io(err: io::Error, during: &'static str) -> TransportError {
        match err.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout(during),
            io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::UnexpectedEof => TransportError::Closed,
            _ => TransportError::Io(err),
        }
    }
}

/// Benchmark parameters both peers must agree on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeInfo {
    pub mode: Mode,
    pub payload_size: u32,
    pub message_count: u64,
}

impl HandshakeInfo {
    pub fn new(mode: Mode, point: SchedulePoint) -> Self {
        HandshakeInfo {
            mode,
            payload_size: u32::try_from(point.payload_size).expect("payload size fits in u32"),
            message_count: point.message_count,
        }
    }

    pub fn encode(&self) -> [u8; HANDSHAKE_LEN] {
        let mut frame = [0u8; HANDSHAKE_LEN];
        frame[0..4].copy_from_slice(&HANDSHAKE_MAGIC);
        frame[4] = HANDSHAKE_VERSION;
        frame[5] = self.mode.ordinal();
        frame[6..10].copy_from_slice(&self.payload_size.to_le_bytes());
        frame[10..18].copy_from_slice(&self.message_count.to_le_bytes());
        frame
    }

    pub fn decode(frame: &[u8; HANDSHAKE_LEN]) -> Result<HandshakeInfo, TransportError> {
        if frame[0..4] != HANDSHAKE_MAGIC {
            return Err(TransportError::NotAPeer);
        }
        if frame[4] != HANDSHAKE_VERSION {
            return Err(TransportError::UnsupportedVersion(frame[4]));
        }
        let mode = Mode::from_ordinal(frame[5]).ok_or(TransportError::UnknownMode(frame[5]))?;
        Ok(HandshakeInfo {
            mode,
            payload_size: u32::from_le_bytes(frame[6..10].try_into().unwrap()),
            message_count: u64::from_le_bytes(frame[10..18].try_into().unwrap()),
        })
    }

    /// First field that differs from `remote`.
    pub fn check_matches(&self, remote: &HandshakeInfo) -> Result<(), TransportError> {
        let mismatch = |field, local: String, remote: String| {
            Err(TransportError::Mismatch {
                field,
                local,
                remote,
            })
        };
        if self.mode != remote.mode {
            return mismatch("mode", self.mode.to_string(), remote.mode.to_string());
        }
        if self.payload_size != remote.payload_size {
            return mismatch(
                "payload_size",
                self.payload_size.to_string(),
                remote.payload_size.to_string(),
            );
        }
        if self.message_count != remote.message_count {
            return mismatch(
                "message_count",
                self.message_count.to_string(),
                remote.message_count.to_string(),
            );
        }
        Ok(())
    }
}

/// Sending side of the blocking transport contract.
pub trait BlockingSend {
    /// Returns once every byte has been accepted by the channel. Delivery to
    /// the peer is not implied.
    fn send_blocking(&mut self, payload: &[u8]) -> Result<(), TransportError>;
}

/// Receiving side of the blocking transport contract.
pub trait BlockingRecv {
    /// Fills `buf` completely, looping over short reads.
    fn recv_into(&mut self, buf: &mut [u8]) -> Result<(), TransportError>;

    fn recv_blocking(&mut self, len: usize) -> Result<Vec<u8>, TransportError> {
        let mut buf = vec![0u8; len];
        self.recv_into(&mut buf)?;
        Ok(buf)
    }
}

fn write_all(mut stream: &TcpStream, payload: &[u8]) -> Result<(), TransportError> {
    stream
        .write_all(payload)
        .map_err(|e| TransportError::from_io(e, "sending"))
}

fn read_exact(mut stream: &TcpStream, buf: &mut [u8]) -> Result<(), TransportError> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(TransportError::Truncated {
                    expected: buf.len(),
                    received: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(TransportError::from_io(e, "receiving")),
        }
    }
    Ok(())
}

/// An established, handshaken TCP connection.
#[derive(Debug)]
pub struct Connection {
    stream: TcpStream,
    peer: SocketAddr,
    role: Role,
    info: HandshakeInfo,
    handshake_timeout: Duration,
}

impl Connection {
    fn establish(
        stream: TcpStream,
        role: Role,
        config: &BenchmarkConfig,
        info: HandshakeInfo,
    ) -> Result<Connection, TransportError> {
        let peer = stream.peer_addr()?;
        stream.set_nodelay(config.mode.is_latency_pattern())?;
        let mut conn = Connection {
            stream,
            peer,
            role,
            info,
            handshake_timeout: config.connect_timeout,
        };
        conn.renegotiate(info)?;
        conn.set_progress_timeout(Some(config.progress_timeout))?;
        Ok(conn)
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.stream.local_addr()?)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn info(&self) -> HandshakeInfo {
        self.info
    }

    pub fn nodelay(&self) -> Result<bool, TransportError> {
        Ok(self.stream.nodelay()?)
    }

    /// Blocking calls fail after `timeout` without progress.
    pub fn set_progress_timeout(&self, timeout: Option<Duration>) -> Result<(), TransportError> {
        self.stream.set_read_timeout(timeout)?;
        self.stream.set_write_timeout(timeout)?;
        Ok(())
    }

    /// Exchanges a parameter frame on the open connection; the client speaks
    /// first and the server answers with its own frame before validating.
    pub fn renegotiate(&mut self, info: HandshakeInfo) -> Result<(), TransportError> {
        let previous = self.stream.read_timeout()?;
        self.stream.set_read_timeout(Some(self.handshake_timeout))?;
        let result = self.exchange(info);
        self.stream.set_read_timeout(previous)?;
        let remote = result?;
        info.check_matches(&remote)?;
        self.info = info;
        Ok(())
    }

    fn exchange(&mut self, info: HandshakeInfo) -> Result<HandshakeInfo, TransportError> {
        let mut frame = [0u8; HANDSHAKE_LEN];
        let read = |stream: &TcpStream, frame: &mut [u8; HANDSHAKE_LEN]| {
            read_exact(stream, frame).map_err(|e| match e {
                TransportError::Timeout(_) => TransportError::Timeout("waiting for handshake"),
                TransportError::Truncated { .. } => TransportError::NotAPeer,
                other => other,
            })
        };
        match self.role {
            Role::Client => {
                write_all(&self.stream, &info.encode())?;
                read(&self.stream, &mut frame)?;
                HandshakeInfo::decode(&frame)
            }
            Role::Server => {
                read(&self.stream, &mut frame)?;
                let remote = HandshakeInfo::decode(&frame)?;
                write_all(&self.stream, &info.encode())?;
                Ok(remote)
            }
        }
    }

    /// Two independently usable halves for concurrent send and receive.
    pub fn split(&self) -> Result<(SendHalf, RecvHalf), TransportError> {
        Ok((
            SendHalf {
                stream: self.stream.try_clone()?,
            },
            RecvHalf {
                stream: self.stream.try_clone()?,
            },
        ))
    }

    pub fn shutdown(&self) -> Result<(), TransportError> {
        match self.stream.shutdown(std::net::Shutdown::Both) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotConnected => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

impl BlockingSend for Connection {
    fn send_blocking(&mut self, payload: &[u8]) -> Result<(), TransportError> {
        write_all(&self.stream, payload)
    }
}

impl BlockingRecv for Connection {
    fn recv_into(&mut self, buf: &mut [u8]) -> Result<(), TransportError> {
        read_exact(&self.stream, buf)
    }
}

#[derive(Debug)]
pub struct SendHalf {
    stream: TcpStream,
}

impl BlockingSend for SendHalf {
    fn send_blocking(&mut self, payload: &[u8]) -> Result<(), TransportError> {
        write_all(&self.stream, payload)
    }
}

#[derive(Debug)]
pub struct RecvHalf {
    stream: TcpStream,
}

impl BlockingRecv for RecvHalf {
    fn recv_into(&mut self, buf: &mut [u8]) -> Result<(), TransportError> {
        read_exact(&self.stream, buf)
    }
}

fn resolve(endpoint: &str) -> Result<Vec<SocketAddr>, TransportError> {
    let addrs: Vec<SocketAddr> = endpoint
        .to_socket_addrs()
        .map_err(|_| TransportError::Resolve(endpoint.to_string()))?
        .collect();
    if addrs.is_empty() {
        return Err(TransportError::Resolve(endpoint.to_string()));
    }
    Ok(addrs)
}

/// A bound server socket that has not accepted its client yet.
#[derive(Debug)]
pub struct Listener {
    inner: TcpListener,
}

impl Listener {
    pub fn bind(endpoint: &str) -> Result<Listener, TransportError> {
        let addrs = resolve(endpoint)?;
        let inner = TcpListener::bind(&addrs[..]).map_err(|source| TransportError::Bind {
            addr: endpoint.to_string(),
            source,
        })?;
        Ok(Listener { inner })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.inner.local_addr()?)
    }

    /// Waits up to `config.connect_timeout` for one client and validates its
    /// handshake against `info`.
    pub fn accept(
        &self,
        config: &BenchmarkConfig,
        info: HandshakeInfo,
    ) -> Result<Connection, TransportError> {
        let deadline = Instant::now() + config.connect_timeout;
        self.inner.set_nonblocking(true)?;
        let stream = loop {
            match self.inner.accept() {
                Ok((stream, _)) => break stream,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout("waiting for a client"));
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nonblocking(false)?;
        Connection::establish(stream, Role::Server, config, info)
    }
}

/// Binds `endpoint` and blocks until one client has connected and agreed on
/// `info`.
pub fn listen(
    endpoint: &str,
    config: &BenchmarkConfig,
    info: HandshakeInfo,
) -> Result<Connection, TransportError> {
    Listener::bind(endpoint)?.accept(config, info)
}

pub fn connect(
    endpoint: &str,
    config: &BenchmarkConfig,
    info: HandshakeInfo,
) -> Result<Connection, TransportError> {
    let mut last_err = None;
    for addr in resolve(endpoint)? {
        match TcpStream::connect_timeout(&addr, config.connect_timeout) {
            Ok(stream) => return Connection::establish(stream, Role::Client, config, info),
            Err(e) if e.kind() == io::ErrorKind::TimedOut => {
                last_err = Some(TransportError::Timeout("connecting"))
            }
            Err(source) => {
                last_err = Some(TransportError::Connect {
                    addr: addr.to_string(),
                    source,
                })
            }
        }
    }
    Err(last_err.unwrap_or_else(|| TransportError::Resolve(endpoint.to_string())))
}
