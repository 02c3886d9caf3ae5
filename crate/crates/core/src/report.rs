//! CSV outputs and a small SVG error-CDF plot.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hydrosim::{ExchangeRecord, MultinodeRow, SummaryRow};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MULTINODE_FILE: &str = "multinode.csv";
pub const TRACK_FILE: &str = "trajectory.csv";

/// Serialize `rows` as CSV with a header; an empty slice still writes the header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!("checked io kind");
    }
    Error::Csv(e)
}

pub const RESULTS_HEADER: [&str; 17] = [
    "distance_index",
    "nominal_distance_m",
    "exchange",
    "query_index",
    "t_query_s",
    "true_distance_m",
    "status",
    "est_distance_m",
    "error_m",
    "t_send_s",
    "t_reply_realized_s",
    "t_reply_predicted_s",
    "sender_alpha",
    "sender_beta",
    "replier_alpha",
    "replier_beta",
    "method",
];

#[derive(Serialize)]
struct ResultRow<'a> {
    distance_index: usize,
    nominal_distance_m: f64,
    exchange: usize,
    query_index: i64,
    t_query_s: f64,
    true_distance_m: f64,
    status: &'a str,
    est_distance_m: Option<f64>,
    error_m: Option<f64>,
    t_send_s: Option<f64>,
    t_reply_realized_s: Option<f64>,
    t_reply_predicted_s: Option<f64>,
    sender_alpha: f64,
    sender_beta: f64,
    replier_alpha: f64,
    replier_beta: f64,
    method: &'a str,
}

pub fn write_results(path: &Path, records: &[ExchangeRecord], method: &str) -> Result<()> {
    let rows: Vec<ResultRow> = records
        .iter()
        .map(|r| ResultRow {
            distance_index: r.distance_index,
            nominal_distance_m: r.nominal_distance_m,
            exchange: r.exchange,
            query_index: r.query_index,
            t_query_s: r.t_query_s,
            true_distance_m: r.true_distance_m,
            status: &r.status,
            est_distance_m: r.est_distance_m,
            error_m: r.error_m,
            t_send_s: r.t_send_s,
            t_reply_realized_s: r.t_reply_realized_s,
            t_reply_predicted_s: r.t_reply_predicted_s,
            sender_alpha: r.sender_alpha,
            sender_beta: r.sender_beta,
            replier_alpha: r.replier_alpha,
            replier_beta: r.replier_beta,
            method,
        })
        .collect();
    write_csv(path, &rows, &RESULTS_HEADER)
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "distance_m",
    "attempts",
    "ranged",
    "detection_rate",
    "median_abs_error_m",
    "p95_abs_error_m",
    "mean_error_m",
];

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows, &SUMMARY_HEADER)
}

pub const MULTINODE_HEADER: [&str; 6] = [
    "diver_id",
    "round",
    "true_distance_m",
    "leader_distance_m",
    "diver_distance_m",
    "disagreement_m",
];

pub fn write_multinode(path: &Path, rows: &[MultinodeRow]) -> Result<()> {
    write_csv(path, rows, &MULTINODE_HEADER)
}

pub const TRACK_HEADER: [&str; 5] = ["t_s", "true_distance_m", "status", "est_distance_m", "error_m"];

#[derive(Serialize)]
struct TrackRow<'a> {
    t_s: f64,
    true_distance_m: f64,
    status: &'a str,
    est_distance_m: Option<f64>,
    error_m: Option<f64>,
}

/// Range estimates against the true range, one row per query.
pub fn write_track(path: &Path, records: &[ExchangeRecord]) -> Result<()> {
    let rows: Vec<TrackRow> = records
        .iter()
        .map(|r| TrackRow {
            t_s: r.t_query_s,
            true_distance_m: r.true_distance_m,
            status: &r.status,
            est_distance_m: r.est_distance_m,
            error_m: r.error_m,
        })
        .collect();
    write_csv(path, &rows, &TRACK_HEADER)
}

/// Polylines over shared axes; `x_label` and `y_label` annotate the frame.
pub fn line_svg(x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|(_, v)| v.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(svg, r#"<text x="{PAD}" y="{}">{x_label} [{x0:.2}, {x1:.2}]</text>"#, H - 10.0);
    let _ = writeln!(svg, r#"<text x="4" y="{}">{y_label} [{y0:.2}, {y1:.2}]</text>"#, PAD - 8.0);
    for (i, (label, values)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut line = String::new();
        for &(x, y) in values {
            let px = PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
            let py = H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
            let _ = write!(line, "{px:.1},{py:.1} ");
        }
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, line.trim_end());
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#,
            W - PAD - 100.0,
            PAD + 14.0 * (i + 1) as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Empirical CDF of absolute errors, one curve per labelled series.
pub fn cdf_svg(series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let xmax = series
        .iter()
        .flat_map(|(_, v)| v.iter().map(|x| x.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}">abs error (m), max {xmax:.3}</text>"#, PAD, H - 10.0);
    for (i, (label, values)) in series.iter().enumerate() {
        let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
        v.sort_by(f64::total_cmp);
        let color = COLORS[i % COLORS.len()];
        let mut pts = String::new();
        for (k, x) in v.iter().enumerate() {
            let px = PAD + x / xmax * (W - 2.0 * PAD);
            let py = H - PAD - (k + 1) as f64 / v.len() as f64 * (H - 2.0 * PAD);
            let _ = write!(pts, "{px:.1},{py:.1} ");
        }
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.trim_end());
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#,
            W - PAD - 100.0,
            PAD + 14.0 * (i + 1) as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
