use wirebench::simverbs::{
    create_queue_pair_pair, CompletionStatus, LinkTiming, SimConfig, SimQueuePair, WorkRequest,
};

/// Sends `n` messages while only `prepost` receives exist up front; the
/// rest are posted one by one after `delay_ns` of simulated time each.
pub fn delayed_receiver_run(
    n: u64,
    prepost: u64,
    delay_ns: u64,
    retry_limit: u32,
) -> (SimQueuePair, SimQueuePair, Vec<CompletionStatus>, u64) {
    let (a, b) = create_queue_pair_pair(SimConfig {
        send_depth: 16,
        recv_depth: 128,
        rnr_retry_limit: retry_limit,
        rnr_delay_ns: 10_000,
        timing: LinkTiming::default(),
        record_deliveries: true,
        ..SimConfig::default()
    });
    for id in 0..prepost.min(n) {
        b.post_recv(WorkRequest::recv(id, 64)).unwrap();
    }
    let mut posted_recvs = prepost.min(n);
    let mut next_recv_at = delay_ns;
    let mut sent = 0;
    let mut statuses = Vec::new();
    let mut received = 0;
    while (statuses.len() as u64) < n {
        while sent < n && a.send_occupancy() < 16 {
            a.post_send(WorkRequest::send(sent, 64)).unwrap();
            sent += 1;
        }
        if posted_recvs < n && a.now() >= next_recv_at && b.posted_recvs() < 128 {
            b.post_recv(WorkRequest::recv(posted_recvs, 64)).unwrap();
            posted_recvs += 1;
            next_recv_at = a.now() + delay_ns;
        }
        let wcs = a.poll_cq(64);
        received += b
            .poll_cq(64)
            .iter()
            .filter(|w| w.status == CompletionStatus::Ok)
            .count() as u64;
        if wcs.is_empty() {
            if posted_recvs < n && next_recv_at > a.now() {
                a.run_until(next_recv_at);
            } else {
                a.step().expect("simulation stalled");
            }
        }
        statuses.extend(wcs.iter().map(|w| w.status));
    }
    received += b
        .poll_cq(64)
        .iter()
        .filter(|w| w.status == CompletionStatus::Ok)
        .count() as u64;
    (a, b, statuses, received)
}
