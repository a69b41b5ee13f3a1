use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use wirebench::engine::stream;
use wirebench::overhead::TransportKind;
use wirebench::schedule::{BenchmarkConfig, Mode, Role, SchedulePoint};
use wirebench::transport::{
    connect, BlockingRecv, BlockingSend, Connection, HandshakeInfo, Listener, TransportError,
};

fn config(mode: Mode) -> BenchmarkConfig {
    let mut cfg = BenchmarkConfig::new(mode, TransportKind::RawStream);
    cfg.connect_timeout = Duration::from_secs(5);
    cfg.progress_timeout = Duration::from_secs(10);
    cfg
}

fn info(mode: Mode, size: u64, count: u64) -> HandshakeInfo {
    HandshakeInfo::new(
        mode,
        SchedulePoint {
            payload_size: size,
            message_count: count,
        },
    )
}

/// Accepts on an ephemeral port in a thread and connects to it.
fn pair_with(
    mode: Mode,
    server_info: HandshakeInfo,
    client_info: HandshakeInfo,
) -> (
    Result<Connection, TransportError>,
    Result<Connection, TransportError>,
) {
    let cfg = config(mode);
    let listener = Listener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let scfg = cfg.clone();
    let server = thread::spawn(move || listener.accept(&scfg, server_info));
    let client = connect(&addr.to_string(), &cfg, client_info);
    (server.join().unwrap(), client)
}

fn pair(mode: Mode, size: u64, count: u64) -> (Connection, Connection) {
    let i = info(mode, size, count);
    let (s, c) = pair_with(mode, i, i);
    (s.unwrap(), c.unwrap())
}

#[test]
fn matching_handshake_connects() {
    let (server, client) = pair(Mode::Unidir, 4096, 10);
    assert_eq!(server.role(), Role::Server);
    assert_eq!(client.role(), Role::Client);
    assert_eq!(server.info(), client.info());
    assert_eq!(server.peer(), client.local_addr().unwrap());
}

#[test]
fn size_mismatch_is_reported_on_both_sides() {
    let (server, client) = pair_with(
        Mode::Unidir,
        info(Mode::Unidir, 4096, 10),
        info(Mode::Unidir, 8192, 10),
    );
    for err in [server.unwrap_err(), client.unwrap_err()] {
        assert!(
            matches!(
                err,
                TransportError::Mismatch {
                    field: "payload_size",
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("payload_size mismatch"));
    }
}

#[test]
fn mode_and_count_mismatch() {
    let (s, _) = pair_with(
        Mode::Unidir,
        info(Mode::Unidir, 64, 10),
        info(Mode::Bidir, 64, 10),
    );
    assert!(matches!(
        s.unwrap_err(),
        TransportError::Mismatch { field: "mode", .. }
    ));
    let (s, _) = pair_with(
        Mode::Unidir,
        info(Mode::Unidir, 64, 10),
        info(Mode::Unidir, 64, 11),
    );
    assert!(matches!(
        s.unwrap_err(),
        TransportError::Mismatch {
            field: "message_count",
            ..
        }
    ));
}

#[test]
fn server_rejects_foreign_client() {
    let cfg = config(Mode::Unidir);
    let listener = Listener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || listener.accept(&cfg, info(Mode::Unidir, 1, 1)));
    let mut raw = TcpStream::connect(addr).unwrap();
    raw.write_all(b"GET / HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let err = server.join().unwrap().unwrap_err();
    assert!(matches!(err, TransportError::NotAPeer), "{err}");
    assert_eq!(err.to_string(), "not a wirebench peer");
}

#[test]
fn client_rejects_foreign_server() {
    let raw = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = raw.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = raw.accept().unwrap();
        let mut frame = [0u8; 18];
        s.read_exact(&mut frame).unwrap();
        s.write_all(b"SSH-2.0-OpenSSH_9.6\r\n").unwrap();
    });
    let err = connect(
        &addr.to_string(),
        &config(Mode::Unidir),
        info(Mode::Unidir, 1, 1),
    )
    .unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, TransportError::NotAPeer), "{err}");
}

#[test]
fn early_hangup_during_handshake_is_not_a_peer() {
    let raw = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = raw.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = raw.accept().unwrap();
        let mut frame = [0u8; 18];
        s.read_exact(&mut frame).unwrap();
        s.write_all(b"WBJ").unwrap();
    });
    let err = connect(
        &addr.to_string(),
        &config(Mode::Unidir),
        info(Mode::Unidir, 1, 1),
    )
    .unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, TransportError::NotAPeer), "{err}");
}

#[test]
fn refused_connection() {
    let addr: SocketAddr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let err = connect(
        &addr.to_string(),
        &config(Mode::Unidir),
        info(Mode::Unidir, 1, 1),
    )
    .unwrap_err();
    assert!(matches!(err, TransportError::Connect { .. }), "{err}");
}

#[test]
fn accept_times_out() {
    let mut cfg = config(Mode::Unidir);
    cfg.connect_timeout = Duration::from_millis(50);
    let listener = Listener::bind("127.0.0.1:0").unwrap();
    let err = listener.accept(&cfg, info(Mode::Unidir, 1, 1)).unwrap_err();
    assert!(matches!(err, TransportError::Timeout(_)), "{err}");
}

#[test]
fn unresolvable_endpoint() {
    let err = connect(
        "no-port-here",
        &config(Mode::Unidir),
        info(Mode::Unidir, 1, 1),
    )
    .unwrap_err();
    assert!(matches!(err, TransportError::Resolve(_)), "{err}");
}

#[test]
fn nodelay_follows_mode() {
    for (mode, expected) in [
        (Mode::Unidir, false),
        (Mode::Bidir, false),
        (Mode::Latency, true),
        (Mode::Pingpong, true),
        (Mode::Overhead, true),
    ] {
        let (s, c) = pair(mode, 1, 1);
        assert_eq!(s.nodelay().unwrap(), expected, "{mode}");
        assert_eq!(c.nodelay().unwrap(), expected, "{mode}");
    }
}

#[test]
fn single_byte_and_one_mebibyte_arrive_intact() {
    let (mut s, mut c) = pair(Mode::Unidir, 1 << 20, 2);
    let big: Vec<u8> = (0..1 << 20).map(|i: u32| (i % 251) as u8).collect();
    let expected = big.clone();
    let sender = thread::spawn(move || {
        c.send_blocking(&[42]).unwrap();
        c.send_blocking(&big).unwrap();
        c
    });
    let mut one = [0u8; 1];
    s.recv_into(&mut one).unwrap();
    assert_eq!(one, [42]);
    let got = s.recv_blocking(1 << 20).unwrap();
    assert_eq!(got.len(), 1 << 20);
    assert!(got == expected);
    sender.join().unwrap();
}

#[test]
fn back_to_back_messages_are_reassembled() {
    let (mut s, mut c) = pair(Mode::Unidir, 4096, 3);
    let sender = thread::spawn(move || {
        let mut all = Vec::new();
        for seed in 0..3u8 {
            all.extend(std::iter::repeat_n(seed, 4096));
        }
        // One write carrying three messages.
        c.send_blocking(&all).unwrap();
        c
    });
    for seed in 0..3u8 {
        let msg = s.recv_blocking(4096).unwrap();
        assert!(msg.iter().all(|&b| b == seed));
    }
    sender.join().unwrap();
}

#[test]
fn truncation_reports_bytes_so_far() {
    let (mut s, c) = pair(Mode::Unidir, 4096, 1);
    let sender = thread::spawn(move || {
        let mut c = c;
        c.send_blocking(&[7u8; 100]).unwrap();
        c.shutdown().unwrap();
    });
    let mut buf = [0u8; 4096];
    let err = s.recv_into(&mut buf).unwrap_err();
    sender.join().unwrap();
    assert!(
        matches!(
            err,
            TransportError::Truncated {
                expected: 4096,
                received: 100
            }
        ),
        "{err}"
    );
}

#[test]
fn zero_length_receive_returns_immediately() {
    let (mut s, _c) = pair(Mode::Unidir, 1, 1);
    assert_eq!(s.recv_blocking(0).unwrap(), Vec::<u8>::new());
    let mut empty = [0u8; 0];
    s.recv_into(&mut empty).unwrap();
}

#[test]
fn send_after_peer_close_fails() {
    let (s, mut c) = pair(Mode::Unidir, 1024, 1);
    drop(s);
    thread::sleep(Duration::from_millis(20));
    let chunk = vec![0u8; 1 << 16];
    let err = (0..1000)
        .find_map(|_| c.send_blocking(&chunk).err())
        .expect("writes kept succeeding after the peer closed");
    assert!(
        matches!(err, TransportError::Closed | TransportError::Io(_)),
        "{err}"
    );
}

#[test]
fn renegotiation_on_open_connection() {
    let (mut s, mut c) = pair(Mode::Unidir, 1, 10);
    let next = info(Mode::Unidir, 2, 10);
    let server = thread::spawn(move || {
        s.renegotiate(next).unwrap();
        s
    });
    c.renegotiate(next).unwrap();
    let s = server.join().unwrap();
    assert_eq!(s.info(), next);
    assert_eq!(c.info(), next);
}

/// Runs one point of `mode` over loopback and returns (server, client) reports.
fn run_mode(
    mode: Mode,
    size: u64,
    count: u64,
    warmup: u64,
) -> (wirebench::engine::RunReport, wirebench::engine::RunReport) {
    let (mut s, mut c) = pair(mode, size, count);
    let mut cfg = config(mode);
    cfg.warmup_count = warmup;
    let point = SchedulePoint {
        payload_size: size,
        message_count: count,
    };
    let scfg = cfg.clone();
    let server = thread::spawn(move || stream::run_point(&mut s, point, &scfg, 1).unwrap());
    let client = stream::run_point(&mut c, point, &cfg, 1).unwrap();
    (server.join().unwrap(), client)
}

#[test]
fn byte_conservation_in_every_mode() {
    for mode in Mode::ALL {
        for size in [1, 4096, 65536] {
            let (s, c) = run_mode(mode, size, 200, 20);
            match mode {
                Mode::Unidir | Mode::Latency => {
                    assert_eq!(c.bytes_sent, s.bytes_received, "{mode} {size}");
                    assert_eq!(s.bytes_received, 180 * size);
                }
                Mode::Bidir => {
                    assert_eq!(c.bytes_sent, s.bytes_received, "{mode} {size}");
                    assert_eq!(s.bytes_sent, c.bytes_received, "{mode} {size}");
                    assert_eq!(c.messages, 360);
                }
                Mode::Pingpong | Mode::Overhead => {
                    assert_eq!(c.bytes_received, c.bytes_sent);
                    assert_eq!(s.bytes_received, c.bytes_sent);
                }
            }
        }
    }
}

#[test]
fn latency_modes_collect_one_sample_per_measured_message() {
    let (_, c) = run_mode(Mode::Latency, 64, 500, 50);
    assert_eq!(c.latency.unwrap().len(), 450);
    let (_, c) = run_mode(Mode::Pingpong, 64, 500, 50);
    let samples = c.latency.unwrap();
    assert_eq!(samples.len(), 450);
    assert!(samples.as_slice().iter().all(|&ns| ns > 0));
}
