//! Report JSON, CSV tables and SVG sweep charts.

use std::fmt::Write as _;
use std::path::Path;

use permweld_core::landscape::SweepReport;
use permweld_core::MergeMetrics;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{at_path, CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Merge metrics; the data-dependent entries are absent when a merge ran
/// without evaluation data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetrics {
    pub l2_raw: f64,
    pub l2_per_param: f64,
    pub barrier: Option<f64>,
    pub sharpness: Option<f64>,
    pub flipped_acc: Option<f64>,
    pub best_lambda_acc: Option<f64>,
    /// Test-mixture accuracy of the merged model.
    pub midpoint_acc: Option<f64>,
    /// Test-mixture loss of the merged model.
    pub midpoint_loss: Option<f64>,
}

impl ReportMetrics {
    pub fn full(m: &MergeMetrics, midpoint_loss: f64) -> Self {
        ReportMetrics {
            l2_raw: m.l2_raw,
            l2_per_param: m.l2_per_param,
            barrier: Some(m.barrier),
            sharpness: Some(m.sharpness),
            flipped_acc: Some(m.flipped_acc),
            best_lambda_acc: Some(m.best_lambda_acc),
            midpoint_acc: Some(m.midpoint_acc),
            midpoint_loss: Some(midpoint_loss),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = at_path(std::fs::read(path), path)?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub checkpoints: Vec<FileDigest>,
    /// Datasets the alignment itself consumed.
    pub align_data: Vec<String>,
    /// Train/test datasets behind the metrics.
    pub eval_data: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeReport {
    pub tool_version: String,
    pub config_digest: String,
    pub method: String,
    pub metrics: ReportMetrics,
    pub sweep: Option<SweepReport>,
    pub provenance: Provenance,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    at_path(std::fs::write(path, text), path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub const SWEEP_HEADER: [&str; 7] = ["lambda", "loss_a", "loss_b", "loss_ab", "acc_a", "acc_b", "acc_ab"];

pub fn write_sweep_csv(sweep: &SweepReport, path: &Path) -> CliResult<()> {
    let mut w = at_path(csv::Writer::from_path(path), path)?;
    w.write_record(SWEEP_HEADER)?;
    for i in 0..sweep.len() {
        let row = [
            sweep.lambdas[i],
            sweep.loss_a[i],
            sweep.loss_b[i],
            sweep.loss_ab[i],
            sweep.acc_a[i],
            sweep.acc_b[i],
            sweep.acc_ab[i],
        ];
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a CSV with the given header; each row is already formatted.
pub fn write_csv(header: &[&str], rows: &[Vec<String>], path: &Path) -> CliResult<()> {
    let mut w = at_path(csv::Writer::from_path(path), path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
const SERIES: [&str; 3] = ["D_A", "D_B", "D_AB"];

/// Two side-by-side panels (loss, accuracy) with one line per dataset.
pub fn render_svg(sweep: &SweepReport) -> String {
    let width = 2.0 * (PANEL_W + 2.0 * MARGIN);
    let height = PANEL_H + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    panel(&mut s, 0.0, "loss", [&sweep.loss_a, &sweep.loss_b, &sweep.loss_ab], &sweep.lambdas);
    panel(
        &mut s,
        PANEL_W + 2.0 * MARGIN,
        "accuracy",
        [&sweep.acc_a, &sweep.acc_b, &sweep.acc_ab],
        &sweep.lambdas,
    );
    s.push_str("</svg>\n");
    s
}

fn panel(s: &mut String, x0: f64, title: &str, series: [&Vec<f64>; 3], lambdas: &[f64]) {
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|v| v.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let left = x0 + MARGIN;
    let top = MARGIN;
    let px = |l: f64| left + l * PANEL_W;
    let py = |v: f64| top + (hi - v) / (hi - lo) * PANEL_H;
    let _ = writeln!(s, r#"<g class="panel" data-title="{title}">"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{title}</text>"#,
        left + PANEL_W / 2.0,
        top - 16.0
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
    );
    for (l, label) in [(0.0, "λ=0"), (0.5, "λ=0.5"), (1.0, "λ=1")] {
        let x = px(l);
        let y = top + PANEL_H;
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{y:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
            y + 5.0,
            y + 18.0
        );
    }
    for (v, anchor_y) in [(hi, top), (lo, top + PANEL_H)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            left - 6.0,
            anchor_y + 4.0
        );
    }
    for (k, values) in series.iter().enumerate() {
        let pts: Vec<String> = lambdas
            .iter()
            .zip(values.iter())
            .map(|(&l, &v)| format!("{:.2},{:.2}", px(l), py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-series="{}" fill="none" stroke="{}" stroke-width="1.6" points="{}"/>"#,
            SERIES[k],
            COLORS[k],
            pts.join(" ")
        );
        let ly = top + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{}" text-anchor="end">{}</text>"#,
            left + PANEL_W - 6.0,
            COLORS[k],
            SERIES[k]
        );
    }
    s.push_str("</g>\n");
}

pub fn emit_svg(sweep: &SweepReport, path: &Path) -> CliResult<()> {
    at_path(std::fs::write(path, render_svg(sweep)), path)
}

/// Writes `<stem>.csv` and `<stem>.svg` next to each other.
pub fn emit_sweep(sweep: &SweepReport, dir: &Path, stem: &str) -> CliResult<()> {
    write_sweep_csv(sweep, &dir.join(format!("{stem}.csv")))?;
    emit_svg(sweep, &dir.join(format!("{stem}.svg")))
}
