//! Command-line front end: argument parsing, the sweep over the schedule,
//! CSV flushing and plot rendering.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::engine::verbs::{Scheduling, VerbsBench};
use crate::engine::{stream, EngineError, RunReport};
use crate::overhead::TransportKind;
use crate::report::{self, CsvRow, ReportError};
use crate::schedule::{
    parse_size, validate_config, BenchmarkConfig, ConfigError, Mode, Role, SchedulePoint,
};
use crate::simverbs::LinkTiming;
use crate::stats;
use crate::transport::{self, Connection, HandshakeInfo, Listener, TransportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;

/// Environment fallback for `--out`.
pub const OUT_ENV: &str = "WIREBENCH_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliTransport {
    Tcp,
    SimverbsRcMsg,
    SimverbsRdmaWrite,
    SimverbsRdmaRead,
}

impl CliTransport {
    pub fn kind(self) -> TransportKind {
        match self {
            CliTransport::Tcp => TransportKind::RawStream,
            CliTransport::SimverbsRcMsg => TransportKind::RcMsg,
            CliTransport::SimverbsRdmaWrite => TransportKind::RcRdmaWrite,
            CliTransport::SimverbsRdmaRead => TransportKind::RcRdmaRead,
        }
    }

    pub fn from_kind(kind: TransportKind) -> Option<CliTransport> {
        [
            CliTransport::Tcp,
            CliTransport::SimverbsRcMsg,
            CliTransport::SimverbsRdmaWrite,
            CliTransport::SimverbsRdmaRead,
        ]
        .into_iter()
        .find(|t| t.kind() == kind)
    }

    pub fn name(self) -> &'static str {
        match self {
            CliTransport::Tcp => "tcp",
            CliTransport::SimverbsRcMsg => "simverbs-rc-msg",
            CliTransport::SimverbsRdmaWrite => "simverbs-rdma-write",
            CliTransport::SimverbsRdmaRead => "simverbs-rdma-read",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wirebench",
    version,
    about = "Point-to-point throughput, latency and overhead microbenchmarks"
)]
pub struct Args {
    /// Benchmark pattern.
    #[arg(long, default_value = "unidir", value_parser = parse_mode)]
    pub mode: Mode,

    #[arg(long, value_enum, default_value_t = CliTransport::SimverbsRcMsg)]
    pub transport: CliTransport,

    /// Run as the tcp server, bound to HOST:PORT.
    #[arg(long, value_name = "HOST:PORT", conflicts_with = "connect")]
    pub listen: Option<String>,

    /// Run as the tcp client, connecting to HOST:PORT.
    #[arg(long, value_name = "HOST:PORT")]
    pub connect: Option<String>,

    /// Payload size range, powers of two with optional K/M suffix.
    #[arg(long, value_name = "MIN:MAX", default_value = "1:1M")]
    pub sizes: String,

    /// Messages per point below the halving size [default: 1000000 for
    /// throughput modes, 100000 for latency modes].
    #[arg(long, value_name = "N")]
    pub count: Option<u64>,

    /// First payload size at which the count is halved.
    #[arg(long, value_name = "SIZE", default_value = "8K")]
    pub halve_from: String,

    /// Send queue depth (forced to 1 in latency modes).
    #[arg(long, value_name = "D", default_value_t = crate::schedule::DEFAULT_QUEUE_DEPTH)]
    pub queue_depth: usize,

    /// Work requests per post call.
    #[arg(long, value_name = "B", default_value_t = crate::schedule::DEFAULT_POST_BATCH)]
    pub batch: usize,

    #[arg(long, value_name = "R", default_value_t = crate::schedule::DEFAULT_RUNS)]
    pub runs: u32,

    #[arg(long, value_name = "BYTES", default_value = "4K")]
    pub mtu: String,

    /// Unmeasured messages at the start of every run.
    #[arg(long, value_name = "W", default_value_t = 0)]
    pub warmup: u64,

    /// Output directory [env: WIREBENCH_OUT] [default: .]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Write the results CSV, rewritten after every point.
    #[arg(long)]
    pub csv: bool,

    /// Render SVG plots from the results (implies --csv).
    #[arg(long)]
    pub plot: bool,

    /// Render plots from an existing results CSV and exit.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["listen", "connect"])]
    pub from_csv: Option<PathBuf>,

    /// Simulated one-way latency per message.
    #[arg(long, value_name = "NS", default_value_t = LinkTiming::default().one_way_latency_ns)]
    pub sim_latency_ns: u64,

    /// Simulated link occupancy per message.
    #[arg(long, value_name = "NS", default_value_t = LinkTiming::default().per_message_ns)]
    pub sim_message_ns: u64,

    /// Simulated link occupancy per wire byte, in picoseconds.
    #[arg(long, value_name = "PS", default_value_t = LinkTiming::default().per_byte_ps)]
    pub sim_byte_ps: u64,

    /// Drive the two simulated endpoints from separate threads.
    #[arg(long)]
    pub sim_threads: bool,

    #[arg(long, value_name = "US", default_value_t = crate::schedule::DEFAULT_RNR_DELAY_US)]
    pub rnr_delay_us: u64,

    #[arg(long, value_name = "N", default_value_t = crate::schedule::DEFAULT_RNR_RETRY_LIMIT)]
    pub rnr_retry_limit: u32,

    /// Seconds to wait for the tcp peer.
    #[arg(long, value_name = "SECS", default_value_t = 30)]
    pub connect_timeout: u64,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("tcp peer unavailable: {0}")]
    Transport(#[from] TransportError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Report(e) if e.is_io() => EXIT_IO,
            CliError::Report(_) => EXIT_USAGE,
            CliError::Transport(_) => EXIT_TRANSPORT,
        }
    }
}

/// Output options that are not part of the benchmark itself.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputOptions {
    pub out_dir: PathBuf,
    pub csv: bool,
    pub plot: bool,
    pub from_csv: Option<PathBuf>,
    pub scheduling: Scheduling,
}

fn parse_range(text: &str) -> Result<(u64, u64), CliError> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--sizes expects MIN:MAX, got `{text}`")))?;
    Ok((parse_size(lo)?, parse_size(hi)?))
}

/// Turns parsed arguments into a validated configuration.
pub fn build_config(args: &Args) -> Result<(BenchmarkConfig, OutputOptions), CliError> {
    let mut config = BenchmarkConfig::new(args.mode, args.transport.kind());
    let is_tcp = args.transport == CliTransport::Tcp;
    match (&args.listen, &args.connect) {
        (Some(_), _) | (_, Some(_)) if !is_tcp => {
            return Err(CliError::Usage(
                "--listen/--connect only apply to --transport tcp".into(),
            ))
        }
        (Some(ep), None) => {
            config.role = Role::Server;
            config.endpoint = Some(ep.clone());
        }
        (None, Some(ep)) => {
            config.role = Role::Client;
            config.endpoint = Some(ep.clone());
        }
        _ => {}
    }

    (config.min_size, config.max_size) = parse_range(&args.sizes)?;
    if let Some(count) = args.count {
        config.base_count = count;
    }
    config.halve_from = parse_size(&args.halve_from)?;
    config.queue_depth = args.queue_depth;
    config.post_batch = args.batch;
    config.runs = args.runs;
    config.mtu = parse_size(&args.mtu)?;
    config.warmup_count = args.warmup;
    config.rnr_delay_us = args.rnr_delay_us;
    config.rnr_retry_limit = args.rnr_retry_limit;
    config.sim_timing = LinkTiming {
        one_way_latency_ns: args.sim_latency_ns,
        per_message_ns: args.sim_message_ns,
        per_byte_ps: args.sim_byte_ps,
    };
    config.connect_timeout = Duration::from_secs(args.connect_timeout);
    config.out_dir = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));

    let output = OutputOptions {
        out_dir: config.out_dir.clone(),
        csv: args.csv || args.plot,
        plot: args.plot,
        from_csv: args.from_csv.clone(),
        scheduling: if args.sim_threads {
            Scheduling::Threaded
        } else {
            Scheduling::Cooperative
        },
    };
    if output.from_csv.is_some() {
        return Ok((config, output));
    }
    Ok((validate_config(config)?, output))
}

pub fn parse_args<I, T>(argv: I) -> Result<(BenchmarkConfig, OutputOptions), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    build_config(&args)
}

/// Failure of a single schedule point.
#[derive(Debug, Error)]
pub enum PointError {
    /// Recorded in the results; the sweep moves on.
    #[error(transparent)]
    Run(#[from] EngineError),
    /// The peer cannot be reached any more; the sweep stops.
    #[error(transparent)]
    Fatal(TransportError),
}

/// Executes single runs of schedule points.
pub trait PointRunner {
    fn run(&mut self, point: SchedulePoint, run_index: u32) -> Result<RunReport, PointError>;

    /// Called after a failed run, before the next point starts.
    fn reset(&mut self) {}
}

/// Runs every point on a fresh simulated queue pair pair.
pub struct SimRunner {
    config: BenchmarkConfig,
    scheduling: Scheduling,
}

impl SimRunner {
    pub fn new(config: BenchmarkConfig, scheduling: Scheduling) -> Self {
        SimRunner { config, scheduling }
    }
}

impl PointRunner for SimRunner {
    fn run(&mut self, point: SchedulePoint, run_index: u32) -> Result<RunReport, PointError> {
        let bench = VerbsBench::new(&self.config, self.scheduling)?;
        Ok(bench.run_point(point, &self.config, run_index)?)
    }
}

const RETRY_PAUSE: Duration = Duration::from_millis(50);

/// One tcp connection per sweep, renegotiated before every run and
/// re-established after a failure.
pub struct TcpRunner {
    config: BenchmarkConfig,
    listener: Option<Listener>,
    conn: Option<Connection>,
}

impl TcpRunner {
    /// Binds the listening socket up front when acting as server.
    pub fn new(config: BenchmarkConfig) -> Result<Self, TransportError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| TransportError::Resolve(String::new()))?;
        let listener = match config.role {
            Role::Server => Some(Listener::bind(&endpoint)?),
            Role::Client => None,
        };
        Ok(TcpRunner {
            config,
            listener,
            conn: None,
        })
    }

    pub fn local_addr(&self) -> Option<std::net::SocketAddr> {
        self.listener.as_ref().and_then(|l| l.local_addr().ok())
    }

    fn establish(&mut self, info: HandshakeInfo) -> Result<Connection, PointError> {
        if let Some(listener) = &self.listener {
            return listener.accept(&self.config, info).map_err(|e| match e {
                TransportError::Timeout(_) => PointError::Fatal(e),
                e => PointError::Run(EngineError::Transport {
                    index: 0,
                    source: e,
                }),
            });
        }
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let deadline = Instant::now() + self.config.connect_timeout;
        loop {
            match transport::connect(endpoint, &self.config, info) {
                Ok(conn) => return Ok(conn),
                Err(e @ (TransportError::Connect { .. } | TransportError::Timeout(_)))
                    if Instant::now() < deadline =>
                {
                    log::debug!("connect failed, retrying: {e}");
                    thread::sleep(RETRY_PAUSE);
                }
                Err(e @ (TransportError::Connect { .. } | TransportError::Timeout(_)))
                | Err(e @ TransportError::Resolve(_)) => return Err(PointError::Fatal(e)),
                Err(e) => {
                    return Err(PointError::Run(EngineError::Transport {
                        index: 0,
                        source: e,
                    }))
                }
            }
        }
    }
}

impl PointRunner for TcpRunner {
    fn run(&mut self, point: SchedulePoint, run_index: u32) -> Result<RunReport, PointError> {
        let info = HandshakeInfo::new(self.config.mode, point);
        let mut conn = match self.conn.take() {
            Some(mut conn) => {
                conn.renegotiate(info)
                    .map_err(|source| EngineError::Transport { index: 0, source })?;
                conn
            }
            None => self.establish(info)?,
        };
        let report = stream::run_point(&mut conn, point, &self.config, run_index)?;
        self.conn = Some(conn);
        Ok(report)
    }

    fn reset(&mut self) {
        if let Some(conn) = self.conn.take() {
            let _ = conn.shutdown();
        }
    }
}

/// Results of a sweep, in schedule order.
#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<CsvRow>,
    pub reports: Vec<RunReport>,
}

impl SweepOutcome {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Runs every schedule point `config.runs` times. A failed run marks the
/// remaining runs of its point as failed and the sweep continues with the
/// next point. With `csv_path` set, the file is rewritten after every point.
pub fn orchestrate(
    config: &BenchmarkConfig,
    runner: &mut dyn PointRunner,
    csv_path: Option<&Path>,
) -> Result<SweepOutcome, CliError> {
    let transport = transport_label(config.transport);
    let mut outcome = SweepOutcome::default();
    for point in config.schedule()? {
        let mut failure: Option<String> = None;
        for run in 1..=config.runs {
            if let Some(reason) = &failure {
                outcome.rows.push(CsvRow::failed(
                    transport,
                    config.mode,
                    point.payload_size,
                    run,
                    &format!("skipped: {reason}"),
                ));
                continue;
            }
            match runner.run(point, run) {
                Ok(report) => {
                    outcome
                        .rows
                        .push(CsvRow::from_report(transport, config.mode, &report));
                    outcome.reports.push(report);
                }
                Err(PointError::Run(e)) => {
                    log::warn!("{} B run {run} failed: {e}", point.payload_size);
                    runner.reset();
                    outcome.rows.push(CsvRow::failed(
                        transport,
                        config.mode,
                        point.payload_size,
                        run,
                        &e.to_string(),
                    ));
                    failure = Some(format!("run {run} failed"));
                }
                Err(PointError::Fatal(e)) => {
                    if let Some(path) = csv_path {
                        report::write_csv(&outcome.rows, path)?;
                    }
                    return Err(CliError::Transport(e));
                }
            }
        }
        print_point(point, &outcome.rows);
        if let Some(path) = csv_path {
            report::write_csv(&outcome.rows, path)?;
        }
    }
    Ok(outcome)
}

pub fn transport_label(kind: TransportKind) -> &'static str {
    CliTransport::from_kind(kind).map_or(kind.name(), CliTransport::name)
}

fn print_point(point: SchedulePoint, rows: &[CsvRow]) {
    let metrics: Vec<_> = rows
        .iter()
        .filter(|r| r.payload_bytes == point.payload_size)
        .filter_map(CsvRow::metrics)
        .collect();
    let Ok(agg) = stats::aggregate_metrics(&metrics) else {
        println!("{:>8} B  failed", point.payload_size);
        return;
    };
    let mut line = format!(
        "{:>8} B  {:>10} mmps  {:>10} MB/s",
        point.payload_size,
        report::format_sig6(agg.mmps.avg),
        report::format_sig6(agg.mbps.avg)
    );
    if let Some(lat) = agg.avg_us {
        line += &format!("  {:>10} us", report::format_sig6(lat.avg));
    }
    if let Some(ovh) = agg.overhead_pct {
        line += &format!("  {:>10} % overhead", report::format_sig6(ovh.avg));
    }
    println!("{line}");
}

/// Base name of the result files for a configuration.
pub fn output_stem(config: &BenchmarkConfig) -> String {
    let mut stem = format!(
        "wirebench-{}-{}",
        transport_label(config.transport),
        config.mode
    );
    if config.transport == TransportKind::RawStream && config.role == Role::Server {
        stem += "-server";
    }
    stem
}

fn replot(csv: &Path, out_dir: &Path) -> Result<(), CliError> {
    let rows = report::read_csv(csv)?;
    let stem = csv
        .file_stem()
        .map_or_else(|| "wirebench".into(), |s| s.to_string_lossy().into_owned());
    for path in report::plot_csv_rows(&rows, out_dir, &stem)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn execute(config: BenchmarkConfig, output: OutputOptions) -> Result<(), CliError> {
    if let Some(csv) = &output.from_csv {
        return replot(csv, &output.out_dir);
    }
    let stem = output_stem(&config);
    let csv_path = output
        .csv
        .then(|| output.out_dir.join(format!("{stem}.csv")));

    let mut runner: Box<dyn PointRunner> = if config.transport == TransportKind::RawStream {
        let runner = TcpRunner::new(config.clone())?;
        if let Some(addr) = runner.local_addr() {
            log::info!("listening on {addr}");
        }
        Box::new(runner)
    } else {
        Box::new(SimRunner::new(config.clone(), output.scheduling))
    };
    let outcome = orchestrate(&config, runner.as_mut(), csv_path.as_deref())?;
    if outcome.failed_rows() > 0 {
        log::warn!(
            "{} of {} runs failed",
            outcome.failed_rows(),
            outcome.rows.len()
        );
    }

    if let Some(path) = &csv_path {
        println!("wrote {}", path.display());
        if output.plot {
            let rows = report::read_csv(path)?;
            for svg in report::plot_csv_rows(&rows, &output.out_dir, &stem)? {
                println!("wrote {}", svg.display());
            }
        }
    }
    Ok(())
}

/// Full command-line entry point; returns the process exit code.
pub fn run_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(args) => args,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = build_config(&args).and_then(|(config, output)| execute(config, output));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("wirebench: {e}");
            e.exit_code()
        }
    }
}
