//! Result persistence: the CSV results file and SVG plots rendered from it.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::engine::RunReport;
use crate::schedule::Mode;
use crate::stats::{aggregate_by_size, AggregatedPoint, MinAvgMax, RunMetrics};

/// First line of every results file. Bumped whenever the columns change.
pub const CSV_VERSION_LINE: &str = "# wirebench-results v1";

pub const CSV_HEADER: [&str; 14] = [
    "transport",
    "mode",
    "payload_bytes",
    "run",
    "messages",
    "elapsed_ns",
    "mmps",
    "mbps",
    "lat_avg_us",
    "lat_p999_us",
    "lat_p9999_us",
    "wire_bytes",
    "overhead_pct",
    "status",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: not a wirebench results file ({reason})")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("nothing to plot")]
    EmptySeries,
}

impl ReportError {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
        move |source| ReportError::Io {
            path: path.to_owned(),
            source,
        }
    }

    fn csv(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
        move |source| ReportError::Csv {
            path: path.to_owned(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, ReportError::Io { .. } | ReportError::Csv { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

impl RowStatus {
    fn render(&self) -> String {
        match self {
            RowStatus::Ok => "ok".to_owned(),
            RowStatus::Failed(reason) => format!("failed: {reason}"),
        }
    }

    fn parse(s: &str) -> Option<RowStatus> {
        if s == "ok" {
            Some(RowStatus::Ok)
        } else {
            s.strip_prefix("failed: ")
                .or_else(|| s.strip_prefix("failed"))
                .map(|r| RowStatus::Failed(r.to_owned()))
        }
    }
}

/// One (payload size, run) result. Metric fields are empty where the mode
/// does not produce them or the point failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub transport: String,
    pub mode: Mode,
    pub payload_bytes: u64,
    pub run: u32,
    pub messages: Option<u64>,
    pub elapsed_ns: Option<u64>,
    pub mmps: Option<f64>,
    pub mbps: Option<f64>,
    pub lat_avg_us: Option<f64>,
    pub lat_p999_us: Option<f64>,
    pub lat_p9999_us: Option<f64>,
    pub wire_bytes: Option<u64>,
    pub overhead_pct: Option<f64>,
    pub status: RowStatus,
}

impl CsvRow {
    pub fn from_report(transport: &str, mode: Mode, report: &RunReport) -> CsvRow {
        let tp = report.throughput().ok();
        let lat = report.latency_summary();
        CsvRow {
            transport: transport.to_owned(),
            mode,
            payload_bytes: report.payload_size,
            run: report.run_index,
            messages: Some(report.messages),
            elapsed_ns: Some(report.elapsed_ns),
            mmps: tp.map(|t| t.mmps),
            mbps: tp.map(|t| t.mbps),
            lat_avg_us: lat.map(|s| s.avg_us),
            lat_p999_us: lat.map(|s| s.p999_us),
            lat_p9999_us: lat.map(|s| s.p9999_us),
            wire_bytes: report.wire_bytes,
            overhead_pct: report.overhead_pct(),
            status: RowStatus::Ok,
        }
    }

    pub fn failed(
        transport: &str,
        mode: Mode,
        payload_bytes: u64,
        run: u32,
        reason: &str,
    ) -> CsvRow {
        CsvRow {
            transport: transport.to_owned(),
            mode,
            payload_bytes,
            run,
            messages: None,
            elapsed_ns: None,
            mmps: None,
            mbps: None,
            lat_avg_us: None,
            lat_p999_us: None,
            lat_p9999_us: None,
            wire_bytes: None,
            overhead_pct: None,
            status: RowStatus::Failed(reason.replace(['\n', '\r'], " ")),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }

    /// Metrics of a successful row; `None` for failed rows.
    pub fn metrics(&self) -> Option<RunMetrics> {
        if !self.is_ok() {
            return None;
        }
        Some(RunMetrics {
            payload_size: self.payload_bytes,
            mmps: self.mmps?,
            mbps: self.mbps?,
            avg_us: self.lat_avg_us,
            p999_us: self.lat_p999_us,
            p9999_us: self.lat_p9999_us,
            overhead_pct: self.overhead_pct,
        })
    }

    fn sort_key(&self) -> (u64, u32, &str, u8) {
        (
            self.payload_bytes,
            self.run,
            &self.transport,
            self.mode.ordinal(),
        )
    }

    fn fields(&self) -> [String; 14] {
        fn int(v: Option<u64>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        fn real(v: Option<f64>) -> String {
            v.map(format_sig6).unwrap_or_default()
        }
        [
            self.transport.clone(),
            self.mode.name().to_owned(),
            self.payload_bytes.to_string(),
            self.run.to_string(),
            int(self.messages),
            int(self.elapsed_ns),
            real(self.mmps),
            real(self.mbps),
            real(self.lat_avg_us),
            real(self.lat_p999_us),
            real(self.lat_p9999_us),
            int(self.wire_bytes),
            real(self.overhead_pct),
            self.status.render(),
        ]
    }
}

/// Renders `x` with six significant digits, trailing zeros trimmed.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else {
            format!("{x}")
        };
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        let prec = (5 - mag) as usize;
        let s = format!("{x:.prec$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Writes rows sorted by payload size then run. The file is replaced
/// atomically, so a reader never sees a half-written sweep.
pub fn write_csv(rows: &[CsvRow], path: &Path) -> Result<(), ReportError> {
    let mut sorted: Vec<&CsvRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

    let mut out = Vec::with_capacity(64 * (rows.len() + 2));
    out.extend_from_slice(CSV_VERSION_LINE.as_bytes());
    out.push(b'\n');
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(CSV_HEADER).map_err(ReportError::csv(path))?;
        for row in sorted {
            w.write_record(row.fields())
                .map_err(ReportError::csv(path))?;
        }
        w.flush().map_err(ReportError::io(path))?;
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(ReportError::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, &out).map_err(ReportError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(ReportError::io(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, ReportError> {
    let text = fs::read_to_string(path).map_err(ReportError::io(path))?;
    let bad_header = |reason: &str| ReportError::BadHeader {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    let body = text
        .strip_prefix(CSV_VERSION_LINE)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| bad_header("missing version line"))?;

    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader.headers().map_err(ReportError::csv(path))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad_header("unexpected columns"));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(ReportError::csv(path))?;
        // +1 for the version line.
        let line = record.position().map_or(0, |p| p.line() + 1);
        let parse_err = |message: String| ReportError::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let required = |i: usize| -> Result<&str, ReportError> {
            record
                .get(i)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(format!("missing {}", CSV_HEADER[i])))
        };
        fn parse<T: FromStr>(s: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("bad value `{s}`"))
        }
        let optional = |i: usize| record.get(i).filter(|s| !s.is_empty());
        let int = |i: usize| {
            optional(i)
                .map(parse::<u64>)
                .transpose()
                .map_err(&parse_err)
        };
        let real = |i: usize| {
            optional(i)
                .map(parse::<f64>)
                .transpose()
                .map_err(&parse_err)
        };

        rows.push(CsvRow {
            transport: required(0)?.to_owned(),
            mode: required(1)?.parse().map_err(&parse_err)?,
            payload_bytes: parse(required(2)?).map_err(&parse_err)?,
            run: parse(required(3)?).map_err(&parse_err)?,
            messages: int(4)?,
            elapsed_ns: int(5)?,
            mmps: real(6)?,
            mbps: real(7)?,
            lat_avg_us: real(8)?,
            lat_p999_us: real(9)?,
            lat_p9999_us: real(10)?,
            wire_bytes: int(11)?,
            overhead_pct: real(12)?,
            status: RowStatus::parse(required(13)?)
                .ok_or_else(|| parse_err(format!("bad status `{}`", &record[13])))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Throughput,
    Latency,
    Overhead,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::Throughput, PlotKind::Latency, PlotKind::Overhead];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Throughput => "throughput",
            PlotKind::Latency => "latency",
            PlotKind::Overhead => "overhead",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<AggregatedPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub title: String,
    pub series: Vec<Series>,
}

/// One series per (transport, mode) pair, aggregating the successful runs
/// of each payload size.
pub fn series_from_rows(rows: &[CsvRow]) -> Vec<Series> {
    let mut keys: Vec<(&str, Mode)> = rows
        .iter()
        .map(|r| (r.transport.as_str(), r.mode))
        .collect();
    keys.sort_by_key(|(t, m)| (*t, m.ordinal()));
    keys.dedup();
    keys.into_iter()
        .map(|(transport, mode)| {
            let metrics: Vec<RunMetrics> = rows
                .iter()
                .filter(|r| r.transport == transport && r.mode == mode)
                .filter_map(CsvRow::metrics)
                .collect();
            Series {
                name: format!("{transport} {mode}"),
                points: aggregate_by_size(&metrics),
            }
        })
        .filter(|s| !s.points.is_empty())
        .collect()
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 880.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 455.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];
const DOTTED: &str = "2,4";

#[derive(Debug, Clone, Copy)]
enum Scale {
    Linear { max: f64 },
    Log10 { lo: i32, hi: i32 },
}

impl Scale {
    fn linear(values: impl Iterator<Item = f64>) -> Scale {
        let max = values.fold(0.0_f64, f64::max);
        Scale::Linear {
            max: nice_ceiling(max),
        }
    }

    fn log10(values: impl Iterator<Item = f64>) -> Scale {
        let (lo, hi) = values
            .filter(|v| *v > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        if !lo.is_finite() {
            return Scale::Log10 { lo: 0, hi: 1 };
        }
        let lo = lo.log10().floor() as i32;
        let hi = (hi.log10().ceil() as i32).max(lo + 1);
        Scale::Log10 { lo, hi }
    }

    /// Fraction of the axis height, 0 at the bottom.
    fn frac(self, v: f64) -> f64 {
        match self {
            Scale::Linear { max } => v / max,
            Scale::Log10 { lo, hi } => {
                let v = v.max(10f64.powi(lo));
                (v.log10() - lo as f64) / (hi - lo) as f64
            }
        }
    }

    fn y(self, v: f64) -> f64 {
        BOTTOM - self.frac(v).clamp(0.0, 1.0) * (BOTTOM - TOP)
    }

    fn ticks(self) -> Vec<(f64, String)> {
        match self {
            Scale::Linear { max } => (0..=5)
                .map(|i| {
                    let v = max * i as f64 / 5.0;
                    (v, format_sig6(v))
                })
                .collect(),
            Scale::Log10 { lo, hi } => (lo..=hi)
                .map(|e| (10f64.powi(e), format_sig6(10f64.powi(e))))
                .collect(),
        }
    }
}

/// Smallest 1, 2 or 5 times a power of ten that is at least `v`.
fn nice_ceiling(v: f64) -> f64 {
    if v <= 0.0 || !v.is_finite() {
        return 1.0;
    }
    let base = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * base)
        .find(|c| *c >= v * (1.0 - 1e-12))
        .unwrap_or(10.0 * base)
}

fn size_label(bytes: u64) -> String {
    match bytes {
        b if b >= 1 << 20 => format!("{}MB", b >> 20),
        b if b >= 1 << 10 => format!("{}KB", b >> 10),
        b => format!("{b}B"),
    }
}

struct XAxis {
    lo: u32,
    hi: u32,
}

impl XAxis {
    fn covering(series: &[Series]) -> XAxis {
        let sizes = series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.payload_size.max(1)));
        let (lo, hi) = sizes.fold((0u32, 20u32), |(lo, hi), s| {
            (lo.min(s.ilog2()), hi.max(s.next_power_of_two().ilog2()))
        });
        XAxis { lo, hi }
    }

    fn x(&self, size: u64) -> f64 {
        let e = (size.max(1) as f64).log2();
        LEFT + (e - self.lo as f64) / (self.hi - self.lo) as f64 * (RIGHT - LEFT)
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

struct Metric {
    label: &'static str,
    side: Side,
    dotted: bool,
    get: fn(&AggregatedPoint) -> Option<MinAvgMax>,
}

fn metrics_for(kind: PlotKind) -> Vec<Metric> {
    match kind {
        PlotKind::Throughput => vec![
            Metric {
                label: "mmps",
                side: Side::Left,
                dotted: true,
                get: |p| Some(p.mmps),
            },
            Metric {
                label: "MB/s",
                side: Side::Right,
                dotted: false,
                get: |p| Some(p.mbps),
            },
        ],
        PlotKind::Latency => vec![
            Metric {
                label: "latency (µs)",
                side: Side::Left,
                dotted: false,
                get: |p| p.avg_us,
            },
            Metric {
                label: "mmps",
                side: Side::Right,
                dotted: true,
                get: |p| Some(p.mmps),
            },
        ],
        PlotKind::Overhead => vec![Metric {
            label: "overhead (%)",
            side: Side::Left,
            dotted: false,
            get: |p| p.overhead_pct,
        }],
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders the plot as a standalone SVG document.
pub fn render_svg(spec: &PlotSpec) -> Result<String, ReportError> {
    let metrics = metrics_for(spec.kind);
    // The left-axis metric decides whether the plot is worth drawing.
    let primary = metrics[0].get;
    let has_data = spec
        .series
        .iter()
        .any(|s| s.points.iter().any(|p| primary(p).is_some()));
    if !has_data {
        return Err(ReportError::EmptySeries);
    }

    let values = |side: Side| -> Vec<f64> {
        metrics
            .iter()
            .filter(|m| {
                matches!(
                    (m.side, side),
                    (Side::Left, Side::Left) | (Side::Right, Side::Right)
                )
            })
            .flat_map(|m| {
                spec.series
                    .iter()
                    .flat_map(move |s| s.points.iter().filter_map(m.get))
            })
            .flat_map(|v| [v.min, v.max])
            .collect()
    };
    let left = match spec.kind {
        PlotKind::Overhead => Scale::log10(values(Side::Left).into_iter()),
        _ => Scale::linear(values(Side::Left).into_iter()),
    };
    let right = Scale::linear(values(Side::Right).into_iter());
    let xaxis = XAxis::covering(&spec.series);

    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        w,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        w,
        r#"<text class="title" x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(&spec.title)
    );

    // Axes.
    let _ = writeln!(w, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(
        w,
        r#"<line class="x-axis" x1="{LEFT}" y1="{BOTTOM}" x2="{RIGHT}" y2="{BOTTOM}"/>"#
    );
    let _ = writeln!(
        w,
        r#"<line class="y-axis-left" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{BOTTOM}"/>"#
    );
    if metrics.iter().any(|m| matches!(m.side, Side::Right)) {
        let _ = writeln!(
            w,
            r#"<line class="y-axis-right" x1="{RIGHT}" y1="{TOP}" x2="{RIGHT}" y2="{BOTTOM}"/>"#
        );
    }
    let _ = writeln!(w, "</g>");

    let _ = writeln!(w, r#"<g class="x-ticks" text-anchor="middle">"#);
    for e in xaxis.lo..=xaxis.hi {
        let x = xaxis.x(1 << e);
        let _ = writeln!(
            w,
            r#"<line x1="{x:.1}" y1="{BOTTOM}" x2="{x:.1}" y2="{}" stroke="black"/>"#,
            BOTTOM + 5.0
        );
        if (e - xaxis.lo).is_multiple_of(2) {
            let _ = writeln!(
                w,
                r#"<text x="{x:.1}" y="{}">{}</text>"#,
                BOTTOM + 20.0,
                size_label(1 << e)
            );
        }
    }
    let _ = writeln!(w, "</g>");
    let _ = writeln!(
        w,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">payload size</text>"#,
        (LEFT + RIGHT) / 2.0,
        BOTTOM + 42.0
    );

    for (side, scale) in [(Side::Left, left), (Side::Right, right)] {
        let Some(metric) = metrics.iter().find(|m| {
            matches!(
                (m.side, side),
                (Side::Left, Side::Left) | (Side::Right, Side::Right)
            )
        }) else {
            continue;
        };
        let (x, anchor, dx, class) = match side {
            Side::Left => (LEFT, "end", -8.0, "y-ticks-left"),
            Side::Right => (RIGHT, "start", 8.0, "y-ticks-right"),
        };
        let _ = writeln!(w, r#"<g class="{class}" text-anchor="{anchor}">"#);
        for (v, label) in scale.ticks() {
            let y = scale.y(v);
            let _ = writeln!(
                w,
                r#"<line x1="{x}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="black"/>"#,
                x + dx / 2.0
            );
            let _ = writeln!(
                w,
                r#"<text x="{}" y="{:.1}">{label}</text>"#,
                x + dx,
                y + 4.0
            );
        }
        let _ = writeln!(w, "</g>");
        let lx = match side {
            Side::Left => 20.0,
            Side::Right => WIDTH - 20.0,
        };
        let ly = (TOP + BOTTOM) / 2.0;
        let _ = writeln!(
            w,
            r#"<text class="y-label" x="{lx}" y="{ly}" text-anchor="middle" transform="rotate(-90 {lx} {ly})">{}</text>"#,
            escape(metric.label)
        );
    }

    // Data.
    for (i, series) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for metric in &metrics {
            let scale = match metric.side {
                Side::Left => left,
                Side::Right => right,
            };
            let pts: Vec<(f64, MinAvgMax)> = series
                .points
                .iter()
                .filter_map(|p| (metric.get)(p).map(|v| (xaxis.x(p.payload_size), v)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let dash = if metric.dotted {
                format!(r#" stroke-dasharray="{DOTTED}""#)
            } else {
                String::new()
            };
            let _ = writeln!(
                w,
                r#"<g class="series" data-series="{}" data-metric="{}">"#,
                escape(&series.name),
                escape(metric.label)
            );
            let path: Vec<String> = pts
                .iter()
                .map(|(x, v)| format!("{x:.1},{:.1}", scale.y(v.avg)))
                .collect();
            let _ = writeln!(
                w,
                r#"<polyline class="line" points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                path.join(" ")
            );
            for (x, v) in &pts {
                let (y0, y1) = (scale.y(v.min), scale.y(v.max));
                let _ = writeln!(
                    w,
                    r#"<path class="errorbar" d="M{x:.1} {y0:.1}V{y1:.1}M{:.1} {y0:.1}h6M{:.1} {y1:.1}h6" stroke="{color}"/>"#,
                    x - 3.0,
                    x - 3.0
                );
                let _ = writeln!(
                    w,
                    r#"<circle class="marker" cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                    scale.y(v.avg)
                );
            }
            let _ = writeln!(w, "</g>");
        }
    }

    // Legend: one row under the x axis, series first, then line styles.
    let _ = writeln!(w, r#"<g class="legend">"#);
    let ly = HEIGHT - 12.0;
    let mut lx = LEFT;
    for (i, series) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            w,
            r#"<rect x="{lx}" y="{}" width="14" height="4" fill="{color}"/>"#,
            ly - 4.0
        );
        let _ = writeln!(
            w,
            r#"<text class="legend-entry" x="{}" y="{ly}">{}</text>"#,
            lx + 20.0,
            escape(&series.name)
        );
        lx += 40.0 + 7.0 * series.name.chars().count() as f64;
    }
    if metrics.len() > 1 {
        for metric in &metrics {
            let dash = if metric.dotted {
                format!(r#" stroke-dasharray="{DOTTED}""#)
            } else {
                String::new()
            };
            let _ = writeln!(
                w,
                r#"<line x1="{lx}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="black"{dash}/>"#,
                ly - 4.0,
                lx + 14.0,
                ly - 4.0
            );
            let _ = writeln!(
                w,
                r#"<text class="legend-entry" x="{}" y="{ly}">{}</text>"#,
                lx + 20.0,
                escape(metric.label)
            );
            lx += 40.0 + 7.0 * metric.label.chars().count() as f64;
        }
    }
    let _ = writeln!(w, "</g>");
    let _ = writeln!(w, "</svg>");
    Ok(svg)
}

pub fn render_plot(spec: &PlotSpec, path: &Path) -> Result<(), ReportError> {
    let svg = render_svg(spec)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(ReportError::io(dir))?;
    }
    fs::write(path, svg).map_err(ReportError::io(path))
}

/// Renders every plot kind the rows have data for into `dir`, named
/// `<stem>-<kind>.svg`. Returns the files written.
pub fn plot_csv_rows(rows: &[CsvRow], dir: &Path, stem: &str) -> Result<Vec<PathBuf>, ReportError> {
    let series = series_from_rows(rows);
    let mut written = Vec::new();
    for kind in PlotKind::ALL {
        let spec = PlotSpec {
            kind,
            title: format!("{stem} {}", kind.name()),
            series: series.clone(),
        };
        let path = dir.join(format!("{stem}-{}.svg", kind.name()));
        match render_plot(&spec, &path) {
            Ok(()) => written.push(path),
            Err(ReportError::EmptySeries) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(written)
}
