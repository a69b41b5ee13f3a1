use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wirebench::overhead::{compare_counters, per_message_wire_bytes, CounterSample};
use wirebench::simverbs::{
    create_queue_pair_pair, CompletionStatus, DeliveryOutcome, SimConfig, SimError, SimQueuePair,
    VerbsOp, WorkRequest,
};

mod common;
use common::delayed_receiver_run;

fn config(mtu: u64) -> SimConfig {
    SimConfig {
        send_depth: 64,
        recv_depth: 1024,
        mtu,
        ..SimConfig::default()
    }
}

/// Posts `ops` from `a`, keeping at most the send depth outstanding, with a
/// receive already posted on `b` for every SEND. Returns all completions
/// of `a`.
fn replay(a: &SimQueuePair, b: &SimQueuePair, ops: &[(VerbsOp, u64)]) -> Vec<CompletionStatus> {
    for (i, (op, len)) in ops.iter().enumerate() {
        if *op == VerbsOp::Send {
            b.post_recv(WorkRequest::recv(i as u64, *len)).unwrap();
        }
    }
    let depth = a.config().send_depth;
    let mut next = 0;
    let mut statuses = Vec::new();
    while statuses.len() < ops.len() {
        while next < ops.len() && a.send_occupancy() < depth {
            let (op, len) = ops[next];
            a.post_send(WorkRequest::new(next as u64, op, len)).unwrap();
            next += 1;
        }
        let wcs = a.poll_cq(64);
        if wcs.is_empty() {
            a.step().expect("simulation stalled");
        }
        statuses.extend(wcs.iter().map(|w| w.status));
        b.poll_cq(1024);
    }
    statuses
}

fn predicted_wire(ops: &[(VerbsOp, u64)], mtu: u64) -> u64 {
    ops.iter()
        .map(|(op, len)| per_message_wire_bytes(op.wire_kind().unwrap(), *len, mtu).unwrap())
        .sum()
}

fn random_ops(rng: &mut ChaCha8Rng, n: usize) -> Vec<(VerbsOp, u64)> {
    let ops = [VerbsOp::Send, VerbsOp::RdmaWrite, VerbsOp::RdmaRead];
    (0..n)
        .map(|_| (ops[rng.gen_range(0..3)], rng.gen_range(1..=65536)))
        .collect()
}

#[test]
fn mixed_workloads_match_the_header_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mtu = [256, 1024, 2048, 4096][rng.gen_range(0..4)];
        let n = rng.gen_range(1..=300);
        let ops = random_ops(&mut rng, n);
        let (a, b) = create_queue_pair_pair(config(mtu));
        let statuses = replay(&a, &b, &ops);
        assert!(statuses.iter().all(|s| *s == CompletionStatus::Ok));
        let total = a.counters().port_xmit_data + b.counters().port_xmit_data;
        assert_eq!(total, predicted_wire(&ops, mtu));
    }
}

#[test]
fn read_responses_are_charged_to_the_responder() {
    let (a, b) = create_queue_pair_pair(config(4096));
    replay(&a, &b, &[(VerbsOp::RdmaRead, 10_000)]);
    assert_eq!(a.counters().port_xmit_data, 0);
    assert_eq!(b.counters().port_xmit_data, 10_000 + 3 * 42);
}

#[test]
fn homogeneous_groups_leave_no_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for op in [VerbsOp::Send, VerbsOp::RdmaWrite, VerbsOp::RdmaRead] {
        for _ in 0..5 {
            let len = rng.gen_range(1..=65536);
            let n = rng.gen_range(1..200);
            let ops = vec![(op, len); n];
            let (a, b) = create_queue_pair_pair(config(4096));
            replay(&a, &b, &ops);
            let report = compare_counters(
                op.wire_kind().unwrap(),
                4096,
                CounterSample {
                    measured_xmit: a.counters().port_xmit_data + b.counters().port_xmit_data,
                    payload_total: len * n as u64,
                    messages: n as u64,
                },
            )
            .unwrap();
            assert_eq!(report.residual_unmodeled, Some(0.0));
            assert!(!report.is_anomalous());
        }
    }
}

#[test]
fn counters_by_name() {
    let (a, b) = create_queue_pair_pair(config(4096));
    replay(&a, &b, &[(VerbsOp::Send, 1); 3]);
    assert_eq!(a.read_counter("port_xmit_data").unwrap(), 3 * 27);
    assert_eq!(a.read_counter("rnr_nak_retry_err").unwrap(), 0);
    assert_eq!(a.read_counter("messages_completed").unwrap(), 3);
    assert!(matches!(
        a.read_counter("port_rcv_data"),
        Err(SimError::UnknownCounter(_))
    ));
}

#[test]
fn ample_receives_mean_no_naks() {
    let (a, _b, statuses, received) = delayed_receiver_run(100, 100, 0, 7);
    assert!(statuses.iter().all(|s| *s == CompletionStatus::Ok));
    assert_eq!(received, 100);
    assert_eq!(a.counters().rnr_nak_retry_err, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rnr_conservation(
        n in 1u64..60,
        prepost in 0u64..8,
        delay_ns in 0u64..40_000,
        retry_limit in 0u32..8,
    ) {
        let (a, b, statuses, received) = delayed_receiver_run(n, prepost, delay_ns, retry_limit);
        // Every send completes exactly once.
        prop_assert_eq!(statuses.len() as u64, n);
        let ok = statuses.iter().filter(|s| **s == CompletionStatus::Ok).count() as u64;
        let exceeded = statuses
            .iter()
            .filter(|s| **s == CompletionStatus::RnrRetryExceeded)
            .count() as u64;
        prop_assert_eq!(ok + exceeded, n);
        prop_assert_eq!(ok, received);
        prop_assert_eq!(a.counters().messages_completed, ok);

        let log = a.delivery_log();
        let nakd: HashSet<u64> = log
            .iter()
            .filter(|d| d.outcome == DeliveryOutcome::RnrNak)
            .map(|d| d.request_id)
            .collect();
        prop_assert_eq!(a.counters().rnr_nak_retry_err, nakd.len() as u64);
        // Every attempt that reached the responder is charged.
        let charged: u64 = log.iter().map(|d| d.wire_bytes).sum();
        prop_assert_eq!(a.counters().port_xmit_data, charged);
        prop_assert_eq!(b.counters().port_xmit_data, 0);
        if prepost >= n {
            prop_assert_eq!(a.counters().rnr_nak_retry_err, 0);
        }
    }
}
