//! Acceptance criteria, run one after another with their time budgets.
//! Prints one PASS/FAIL line per criterion and exits non-zero on any FAIL.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wirebench::cli::{orchestrate, TcpRunner};
use wirebench::engine::stream::run_pingpong;
use wirebench::engine::verbs::{pace_send_queue, Scheduling, VerbsBench};
use wirebench::overhead::{
    compare_counters, overhead_percent, per_message_wire_bytes, per_packet_header, CounterSample,
    TransportKind,
};
use wirebench::report::{plot_csv_rows, read_csv};
use wirebench::schedule::{
    build_schedule, validate_config, BenchmarkConfig, Mode, Role, SchedulePoint,
    DEFAULT_THROUGHPUT_COUNT,
};
use wirebench::simverbs::{
    create_queue_pair_pair, CompletionStatus, LinkTiming, SimConfig, SimQueuePair, VerbsOp,
    WorkRequest,
};
use wirebench::stats::{summarize, LatencySamples};
use wirebench::transport::{self, BlockingRecv, BlockingSend, HandshakeInfo, Listener};

mod common;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)+));
        }
    };
}

fn point(payload_size: u64, message_count: u64) -> SchedulePoint {
    SchedulePoint {
        payload_size,
        message_count,
    }
}

fn overhead_exactness() -> Outcome {
    check!(
        per_packet_header(TransportKind::RcMsg) == Ok(26),
        "RC msg header"
    );
    for kind in [TransportKind::RcRdmaWrite, TransportKind::RcRdmaRead] {
        check!(per_packet_header(kind) == Ok(42), "{kind} header");
    }
    let round_trip = 2 * per_message_wire_bytes(TransportKind::RcMsg, 1, 4096).unwrap();
    check!(round_trip == 54, "1 B round trip costs {round_trip} B");

    // The simulated ping-pong sees the same bytes on its port counters.
    let cfg = validate_config(BenchmarkConfig::new(Mode::Pingpong, TransportKind::RcMsg)).unwrap();
    let r = VerbsBench::new(&cfg, Scheduling::Cooperative)
        .unwrap()
        .run_point(point(1, 100), &cfg, 1)
        .unwrap();
    let wire = r.wire_bytes.unwrap();
    check!(wire == 54 * 100, "simulated {wire} B for 100 round trips");

    let at_8k = overhead_percent(TransportKind::RcMsg, 8192, 4096).unwrap();
    let at_4k = overhead_percent(TransportKind::RcMsg, 4096, 4096).unwrap();
    check!(at_8k < 1.0, "8 KiB overhead {at_8k}%");
    check!(at_4k >= 0.63, "4 KiB overhead {at_4k}%");
    Ok(format!(
        "26/42 B per packet, 54 B per 1 B round trip, 8 KiB {at_8k:.3}%, 4 KiB {at_4k:.3}%"
    ))
}

/// Replays `ops` keeping the send queue full; a receive is pre-posted for
/// every SEND.
fn replay(a: &SimQueuePair, b: &SimQueuePair, ops: &[(VerbsOp, u64)]) -> Result<(), String> {
    for (i, (op, len)) in ops.iter().enumerate() {
        if *op == VerbsOp::Send {
            b.post_recv(WorkRequest::recv(i as u64, *len)).unwrap();
        }
    }
    let depth = a.config().send_depth;
    let (mut next, mut done) = (0, 0);
    while done < ops.len() {
        while next < ops.len() && a.send_occupancy() < depth {
            let (op, len) = ops[next];
            a.post_send(WorkRequest::new(next as u64, op, len)).unwrap();
            next += 1;
        }
        let wcs = a.poll_cq(64);
        if wcs.is_empty() && a.step().is_none() {
            return Err("simulation stalled".into());
        }
        if let Some(bad) = wcs.iter().find(|w| !w.is_ok()) {
            return Err(format!("completion {:?}", bad.status));
        }
        done += wcs.len();
        b.poll_cq(1024);
    }
    Ok(())
}

fn xmit(a: &SimQueuePair, b: &SimQueuePair) -> u64 {
    a.counters().port_xmit_data + b.counters().port_xmit_data
}

fn counter_model_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let kinds = [VerbsOp::Send, VerbsOp::RdmaWrite, VerbsOp::RdmaRead];
    let mut total_ops = 0;
    for workload in 0..200 {
        let n = rng.gen_range(1..=1000);
        let ops: Vec<(VerbsOp, u64)> = (0..n)
            .map(|_| (kinds[rng.gen_range(0..3)], rng.gen_range(1..=65536)))
            .collect();
        total_ops += n;
        let cfg = SimConfig {
            recv_depth: 1024,
            ..SimConfig::default()
        };
        let (a, b) = create_queue_pair_pair(cfg.clone());
        replay(&a, &b, &ops)?;
        let predicted: u64 = ops
            .iter()
            .map(|(op, len)| {
                per_message_wire_bytes(op.wire_kind().unwrap(), *len, cfg.mtu).unwrap()
            })
            .sum();
        check!(
            xmit(&a, &b) == predicted,
            "workload {workload}: counter {} vs model {predicted}",
            xmit(&a, &b)
        );

        // Same message count, all shaped like the first op: residual must vanish.
        let (op, len) = ops[0];
        let (a, b) = create_queue_pair_pair(cfg.clone());
        replay(&a, &b, &vec![(op, len); n])?;
        let report = compare_counters(
            op.wire_kind().unwrap(),
            cfg.mtu,
            CounterSample {
                measured_xmit: xmit(&a, &b),
                payload_total: len * n as u64,
                messages: n as u64,
            },
        )
        .unwrap();
        check!(
            report.residual_unmodeled == Some(0.0),
            "workload {workload}: residual {:?}",
            report.residual_unmodeled
        );
    }
    Ok(format!("200 workloads, {total_ops} mixed ops, residual 0"))
}

/// Nearest rank by full sort: the smallest k with k/n >= p/100.
fn naive_percentile(sorted: &[u64], p_times_100: u64) -> u64 {
    let n = sorted.len() as u64;
    let k = (1..=n).find(|k| k * 10_000 >= p_times_100 * n).unwrap();
    sorted[k as usize - 1]
}

fn percentile_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut largest = 0;
    for set in 0..100 {
        let n = if set == 0 {
            1_000_000
        } else {
            // Log-uniform so small sets, where rounding bites, are common.
            (10f64.powf(rng.gen_range(0.0..6.0)) as usize).max(1)
        };
        largest = largest.max(n);
        let spread = rng.gen_range(1..=u32::MAX as u64);
        let raw: Vec<u64> = (0..n).map(|_| rng.gen_range(0..spread)).collect();
        let summary = summarize(&LatencySamples::from(raw.clone())).unwrap();
        let mut sorted = raw;
        sorted.sort();
        for (p, got) in [
            (5000, summary.p50_us),
            (9900, summary.p99_us),
            (9990, summary.p999_us),
            (9999, summary.p9999_us),
        ] {
            let want = naive_percentile(&sorted, p) as f64 / 1000.0;
            check!(
                got == want,
                "set {set} (n={n}) p{}: {got} vs {want}",
                p as f64 / 100.0
            );
        }
    }
    Ok(format!("100 sets, n up to {largest}"))
}

/// Posts one request and waits for it before posting the next.
/// Returns (completions, max occupancy, empty detections).
fn one_at_a_time(qp: &SimQueuePair, len: u64, total: u64) -> (u64, usize, u64) {
    let (mut done, mut max_occ, mut empty) = (0, 0, 0);
    for id in 0..total {
        qp.post_send(WorkRequest::rdma_write(id, len)).unwrap();
        max_occ = max_occ.max(qp.send_occupancy());
        loop {
            let wcs = qp.poll_cq(16);
            if !wcs.is_empty() {
                done += wcs.iter().filter(|w| w.is_ok()).count() as u64;
                break;
            }
            qp.step().expect("stalled");
        }
        if id + 1 < total && qp.send_occupancy() == 0 {
            empty += 1;
        }
    }
    (done, max_occ, empty)
}

fn pacing_properties() -> Outcome {
    let total = 2_000;
    let mut combos = 0;
    for depth in [1, 10, 128] {
        for batch in [1, 10].into_iter().filter(|b| *b <= depth) {
            let cfg = SimConfig {
                send_depth: depth,
                ..SimConfig::default()
            };
            let (a, _b) = create_queue_pair_pair(cfg.clone());
            let paced = pace_send_queue(&a, VerbsOp::RdmaWrite, 64, total, depth, batch).unwrap();
            check!(
                paced.max_occupancy <= depth,
                "depth {depth}: occupancy {}",
                paced.max_occupancy
            );
            check!(
                paced.completions == total,
                "depth {depth} batch {batch}: {} completions",
                paced.completions
            );
            check!(
                a.send_occupancy() == 0 && a.poll_cq(1).is_empty(),
                "left-over work"
            );
            check!(
                paced.empty_detections == 0,
                "depth {depth} batch {batch}: detector fired"
            );

            let (c, _d) = create_queue_pair_pair(cfg);
            let (done, max_occ, empty) = one_at_a_time(&c, 64, total);
            check!(done == total && max_occ <= depth, "naive oracle broken");
            check!(empty > 0, "detector silent for the naive pattern");
            combos += 1;
        }
    }
    Ok(format!("{combos} depth/batch combinations"))
}

fn schedule_rule() -> Outcome {
    let base = DEFAULT_THROUGHPUT_COUNT;
    let points = build_schedule(base, 1, 1 << 20, 8 << 10).unwrap();
    check!(points.len() == 21, "{} points", points.len());
    let count = |size: u64| {
        points
            .iter()
            .find(|p| p.payload_size == size)
            .unwrap()
            .message_count
    };
    check!(
        count(8192) == count(4096) / 2,
        "8 KiB count {}",
        count(8192)
    );
    check!(
        count(1 << 20) == (count(8192) / 128).max(1),
        "1 MiB count {}",
        count(1 << 20)
    );

    let tiny = build_schedule(100, 1, 1 << 20, 8 << 10).unwrap();
    check!(
        tiny.last().unwrap().message_count == 1,
        "clamp to one message"
    );
    Ok(format!(
        "count(4K)={} count(8K)={} count(1M)={}",
        count(4096),
        count(8192),
        count(1 << 20)
    ))
}

fn rnr_mechanism() -> Outcome {
    let n = 120;
    let (a, _b, statuses, received) = common::delayed_receiver_run(n, 0, 2_000, 7);
    let naks = a.counters().rnr_nak_retry_err;
    check!(naks > 0, "no RNR NAKs with delayed receives");
    check!(
        statuses.len() as u64 == n,
        "{} completions for {n} sends",
        statuses.len()
    );
    check!(
        statuses.iter().all(|s| *s == CompletionStatus::Ok),
        "a send failed despite retries"
    );
    check!(received == n, "{received} of {n} delivered");
    check!(a.counters().messages_completed == n, "completed counter");

    let (a, _b, statuses, received) = common::delayed_receiver_run(n, n, 0, 7);
    check!(
        a.counters().rnr_nak_retry_err == 0,
        "NAKs with ample receives"
    );
    check!(
        statuses.len() as u64 == n && received == n,
        "ample run incomplete"
    );
    Ok(format!(
        "{naks} NAK'd sends with delayed receives, 0 with ample"
    ))
}

fn bidirectional_doubling() -> Outcome {
    let mut worst: f64 = 2.0;
    for kind in [TransportKind::RcMsg, TransportKind::RcRdmaWrite] {
        for size in [1, 64, 4096, 65536] {
            let rate = |mode| {
                let cfg = validate_config(BenchmarkConfig::new(mode, kind)).unwrap();
                VerbsBench::new(&cfg, Scheduling::Cooperative)
                    .unwrap()
                    .run_point(point(size, 20_000), &cfg, 1)
                    .unwrap()
                    .throughput()
                    .unwrap()
                    .mmps
            };
            let ratio = rate(Mode::Bidir) / rate(Mode::Unidir);
            check!((ratio - 2.0).abs() <= 0.2, "{kind} {size} B: ratio {ratio}");
            if (ratio - 2.0).abs() > (worst - 2.0).abs() {
                worst = ratio;
            }
        }
    }
    Ok(format!("worst ratio {worst:.4}"))
}

fn tcp_loopback_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = |role| {
        let mut cfg = BenchmarkConfig::new(Mode::Unidir, TransportKind::RawStream);
        cfg.base_count = 10_000;
        cfg.max_size = 64 << 10;
        cfg.runs = 3;
        cfg.role = role;
        cfg.endpoint = Some("127.0.0.1:0".into());
        validate_config(cfg).unwrap()
    };
    let server_cfg = base(Role::Server);
    let mut server = TcpRunner::new(server_cfg.clone()).unwrap();
    let mut client_cfg = base(Role::Client);
    client_cfg.endpoint = Some(server.local_addr().unwrap().to_string());

    let server_csv = dir.path().join("server.csv");
    let server_thread = {
        let csv = server_csv.clone();
        thread::spawn(move || orchestrate(&server_cfg, &mut server, Some(&csv)))
    };
    let client_csv = dir.path().join("client.csv");
    let mut client = TcpRunner::new(client_cfg.clone()).unwrap();
    let sent =
        orchestrate(&client_cfg, &mut client, Some(&client_csv)).map_err(|e| e.to_string())?;
    let received = server_thread.join().unwrap().map_err(|e| e.to_string())?;

    check!(
        sent.failed_rows() == 0 && received.failed_rows() == 0,
        "failed runs"
    );
    let mut violations = 0;
    for (tx, rx) in sent.reports.iter().zip(&received.reports) {
        let expected = tx.messages * tx.payload_size;
        if (tx.payload_size, tx.run_index) != (rx.payload_size, rx.run_index)
            || tx.bytes_sent != expected
            || rx.bytes_received != expected
        {
            violations += 1;
        }
    }
    check!(
        sent.reports.len() == 51 && received.reports.len() == 51,
        "report count"
    );
    check!(violations == 0, "{violations} conservation violations");

    let rows = read_csv(&client_csv).map_err(|e| e.to_string())?;
    check!(
        rows.len() == 51 && rows.len() <= 63,
        "{} CSV rows",
        rows.len()
    );
    check!(
        rows.iter().all(|r| r.is_ok() && r.mmps.is_some()),
        "incomplete CSV row"
    );
    let svgs = plot_csv_rows(&rows, dir.path(), "loopback").map_err(|e| e.to_string())?;
    check!(!svgs.is_empty(), "no plots");
    for svg in &svgs {
        well_formed_svg(svg)?;
    }
    Ok(format!(
        "51 runs, 0 violations, {} rows, {} plots",
        rows.len(),
        svgs.len()
    ))
}

fn well_formed_svg(path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    check!(
        doc.root_element().tag_name().name() == "svg",
        "root is not svg"
    );
    let markers = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("marker"))
        .count();
    check!(markers > 0, "{}: no data", path.display());
    Ok(())
}

/// Echo through the engine's server loop; the client is written here and
/// checks every byte of every pong.
fn tcp_echo(size: usize, iterations: u64) -> Result<(), String> {
    let mut cfg = BenchmarkConfig::new(Mode::Pingpong, TransportKind::RawStream);
    cfg.endpoint = Some("127.0.0.1:0".into());
    let cfg = validate_config(cfg).unwrap();
    let p = point(size as u64, iterations);
    let info = HandshakeInfo::new(Mode::Pingpong, p);
    let listener = Listener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().unwrap().to_string();
    let server = {
        let cfg = cfg.clone();
        thread::spawn(move || {
            let mut conn = listener.accept(&cfg, info).map_err(|e| e.to_string())?;
            run_pingpong(&mut conn, p, &cfg, 1).map_err(|e| e.to_string())
        })
    };
    let mut conn = transport::connect(&addr, &cfg, info).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
    let mut ping = vec![0u8; size];
    rng.fill_bytes(&mut ping);
    let mut pong = vec![0u8; size];
    for i in 0..iterations {
        // Vary the payload every iteration without refilling a megabyte.
        let at = (i as usize * 7919) % size;
        ping[at] = ping[at].wrapping_add((i as u8) | 1);
        conn.send_blocking(&ping).map_err(|e| e.to_string())?;
        conn.recv_into(&mut pong).map_err(|e| e.to_string())?;
        check!(pong == ping, "{size} B pong {i} differs");
    }
    let echoed = server.join().unwrap()?;
    check!(
        echoed.bytes_received == iterations * size as u64,
        "server byte count"
    );
    Ok(())
}

fn pingpong_integrity() -> Outcome {
    let sizes = [1usize, 4 << 10, 1 << 20];
    for size in sizes {
        tcp_echo(size, 10_000)?;
    }
    for latency in [1, 700, 2_800] {
        for size in sizes {
            let mut cfg =
                validate_config(BenchmarkConfig::new(Mode::Pingpong, TransportKind::RcMsg))
                    .unwrap();
            cfg.sim_timing = LinkTiming::latency_only(latency);
            let r = VerbsBench::new(&cfg, Scheduling::Cooperative)
                .unwrap()
                .run_point(point(size as u64, 10_000), &cfg, 1)
                .map_err(|e| e.to_string())?;
            let samples = r.latency.unwrap();
            check!(samples.len() == 10_000, "{} samples", samples.len());
            check!(
                samples.as_slice().iter().all(|&s| s == 2 * latency),
                "{size} B at L={latency}: RTT not 2L"
            );
        }
    }
    Ok("3 sizes x 10000 echoes intact, simulated RTT = 2L".into())
}

struct Criterion {
    title: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            title: "overhead exactness",
            budget: Duration::from_secs(1),
            run: overhead_exactness,
        },
        Criterion {
            title: "counter/model equivalence",
            budget: Duration::from_secs(10),
            run: counter_model_equivalence,
        },
        Criterion {
            title: "percentile oracle",
            budget: Duration::from_secs(30),
            run: percentile_oracle,
        },
        Criterion {
            title: "pacing properties",
            budget: Duration::from_secs(10),
            run: pacing_properties,
        },
        Criterion {
            title: "schedule rule",
            budget: Duration::from_secs(1),
            run: schedule_rule,
        },
        Criterion {
            title: "RNR mechanism",
            budget: Duration::from_secs(1),
            run: rnr_mechanism,
        },
        Criterion {
            title: "bidirectional doubling",
            budget: Duration::from_secs(30),
            run: bidirectional_doubling,
        },
        Criterion {
            title: "TCP loopback sweep",
            budget: Duration::from_secs(300),
            run: tcp_loopback_sweep,
        },
        Criterion {
            title: "ping-pong integrity",
            budget: Duration::from_secs(300),
            run: pingpong_integrity,
        },
    ];

    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            })
            .and_then(|detail| {
                let took = start.elapsed();
                if took > c.budget {
                    Err(format!("{detail}; over budget {:?}", c.budget))
                } else {
                    Ok(detail)
                }
            });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {} {} ({took:.2?}): {detail}", i + 1, c.title),
            Err(why) => {
                failures += 1;
                println!("FAIL {} {} ({took:.2?}): {why}", i + 1, c.title);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
