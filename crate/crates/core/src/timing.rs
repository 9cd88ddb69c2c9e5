//! Edge-versus-cloud timing rows and their table rendering.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub scenario: String,
    pub edge_only_s: f64,
    pub cloud_compute_s: f64,
    pub network_s: f64,
    pub total_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TimingError {
    #[error("{field} must be a nonnegative finite number, got {value}")]
    NegativeInput { field: &'static str, value: f64 },
}

/// Builds a row with `total = compute + network` and
/// `speedup = edge_only / total`.
pub fn make_timing_row(
    scenario: &str,
    edge_only_s: f64,
    cloud_compute_s: f64,
    network_s: f64,
) -> Result<TimingRow, TimingError> {
    for (field, value) in [
        ("edge_only_s", edge_only_s),
        ("cloud_compute_s", cloud_compute_s),
        ("network_s", network_s),
    ] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(TimingError::NegativeInput { field, value });
        }
    }
    let total_s = cloud_compute_s + network_s;
    let speedup = if total_s > 0.0 {
        edge_only_s / total_s
    } else if edge_only_s == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(TimingRow {
        scenario: scenario.to_string(),
        edge_only_s,
        cloud_compute_s,
        network_s,
        total_s,
        speedup,
    })
}

const HEADERS: [&str; 6] = ["Scenario", "Edge Only", "Cloud Compute", "Network", "Total", "Speedup"];

fn cells(r: &TimingRow) -> [String; 6] {
    let mut c: [String; 6] = Default::default();
    c[0] = r.scenario.clone();
    let _ = write!(c[1], "{:.3}", r.edge_only_s);
    let _ = write!(c[2], "{:.3}", r.cloud_compute_s);
    let _ = write!(c[3], "{:.3}", r.network_s);
    let _ = write!(c[4], "{:.3}", r.total_s);
    let _ = write!(c[5], "{:.2}x", r.speedup);
    c
}

/// Aligned plain-text table, one line per row after a header and rule.
pub fn render_table(rows: &[TimingRow]) -> String {
    let body: Vec<[String; 6]> = rows.iter().map(cells).collect();
    let mut widths = HEADERS.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cols: &[&str]| {
        for (i, (c, w)) in cols.iter().zip(widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "{c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, &HEADERS);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for r in &body {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Comma-separated rows with a header line.
pub fn render_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("scenario,edge_only_s,cloud_compute_s,network_s,total_s,speedup\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.scenario, r.edge_only_s, r.cloud_compute_s, r.network_s, r.total_s, r.speedup
        );
    }
    out
}
