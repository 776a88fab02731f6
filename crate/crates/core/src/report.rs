//! CSV tables and minimal SVG figures.
//!
//! CSV output is byte-for-byte reproducible. SVG carries a generation
//! timestamp comment unless `deterministic` is set.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeReport;
use crate::stats::{Normalization, RateTensor, ScalingFit, XiRow};
use crate::toy::Checkpoint;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(Error::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub layer: usize,
    pub expert: usize,
    pub position: usize,
    pub rate: f64,
}

pub fn write_rates_csv(path: impl AsRef<Path>, rates: &RateTensor) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    for layer in 0..rates.n_layers {
        for expert in 0..rates.n_experts {
            for (position, &rate) in rates.row(layer, expert).iter().enumerate() {
                w.serialize(RateRecord {
                    layer,
                    expert,
                    position,
                    rate,
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_rates_csv(path: impl AsRef<Path>) -> Result<Vec<RateRecord>> {
    reader(path.as_ref())?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Rebuilds a rate tensor from `(layer, expert, position, rate)` rows in
/// any order; every cell must appear exactly once.
pub fn rates_from_records(records: &[RateRecord], normalization: Normalization) -> Result<RateTensor> {
    if records.is_empty() {
        return Err(Error::Schema("empty rates table".into()));
    }
    let nl = records.iter().map(|r| r.layer).max().unwrap_or(0) + 1;
    let ne = records.iter().map(|r| r.expert).max().unwrap_or(0) + 1;
    let len = records.iter().map(|r| r.position).max().unwrap_or(0) + 1;
    let mut rates = vec![f64::NAN; nl * ne * len];
    for r in records {
        let i = (r.layer * ne + r.expert) * len + r.position;
        if !rates[i].is_nan() {
            return Err(Error::Schema(format!(
                "duplicate cell layer={} expert={} position={}",
                r.layer, r.expert, r.position
            )));
        }
        rates[i] = r.rate;
    }
    if rates.iter().any(|v| v.is_nan()) {
        return Err(Error::Schema("rates table is missing cells".into()));
    }
    RateTensor::from_rates(normalization, nl, ne, len, rates)
}

/// Any serializable row type, header from field names.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_csv_to<W: std::io::Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<stream>", e))
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    reader(path.as_ref())?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub step: usize,
    pub layer: usize,
    pub entropy: f64,
    pub mean_entropy: f64,
    pub eval_cross_entropy: f64,
    /// Per-expert selection counts joined by `;`.
    pub usage: String,
}

/// One row per (checkpoint, layer).
pub fn write_usage_csv(path: impl AsRef<Path>, checkpoints: &[Checkpoint]) -> Result<()> {
    let mut rows = Vec::new();
    for c in checkpoints {
        for (layer, (u, h)) in c.usage.iter().zip(&c.entropy).enumerate() {
            rows.push(UsageRecord {
                step: c.step,
                layer,
                entropy: *h,
                mean_entropy: c.mean_entropy,
                eval_cross_entropy: c.eval_cross_entropy,
                usage: u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
            });
        }
    }
    write_csv(path, &rows)
}

pub fn write_xi_csv(path: impl AsRef<Path>, rows: &[XiRow]) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_xi_csv(path: impl AsRef<Path>) -> Result<Vec<XiRow>> {
    reader(path.as_ref())?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Serialize)]
struct FitRecord {
    alpha: f64,
    xi0: f64,
    r2: f64,
    grid: String,
}

/// One row; `grid` lists the fitted block sizes separated by `;`.
pub fn write_fit_csv(path: impl AsRef<Path>, fit: &ScalingFit) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    write_fit_to(file, fit)
}

pub fn write_fit_to<W: std::io::Write>(out: W, fit: &ScalingFit) -> Result<()> {
    write_csv_to(
        out,
        &[FitRecord {
            alpha: fit.alpha,
            xi0: fit.xi0,
            r2: fit.r_squared,
            grid: fit.grid.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(";"),
        }],
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Table columns of the probe report, each metric followed by its fold std.
pub fn write_probe_csv(path: impl AsRef<Path>, reports: &[ProbeReport]) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    w.write_record([
        "target",
        "classes",
        "acc1",
        "acc1_std",
        "acc2",
        "acc2_std",
        "acc8",
        "acc8_std",
        "ap",
        "ap_std",
        "pr",
        "pr_std",
        "recall",
        "recall_std",
        "f1",
        "f1_std",
        "averaging",
        "best_l2",
        "boundary",
        "converged",
    ])?;
    for r in reports {
        w.write_record([
            r.target.clone(),
            r.classes.to_string(),
            r.acc1.mean.to_string(),
            r.acc1.std.to_string(),
            opt(r.acc2.map(|m| m.mean)),
            opt(r.acc2.map(|m| m.std)),
            opt(r.acc8.map(|m| m.mean)),
            opt(r.acc8.map(|m| m.std)),
            r.average_precision.mean.to_string(),
            r.average_precision.std.to_string(),
            r.precision.mean.to_string(),
            r.precision.std.to_string(),
            r.recall.mean.to_string(),
            r.recall.std.to_string(),
            r.f1.mean.to_string(),
            r.f1.std.to_string(),
            r.averaging.clone(),
            r.best_l2.to_string(),
            r.boundary.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

fn svg_open(width: f64, height: f64, title: &str, deterministic: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"##
    );
    if !deterministic {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(s, "<!-- generated at unix time {secs} -->");
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"##,
        width / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Viridis-like ramp from dark blue to yellow.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = t * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    let (a, b) = (stops[i], stops[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

/// Expert × position heatmap of one layer's rates.
pub fn rates_heatmap_svg(rates: &RateTensor, layer: usize, deterministic: bool) -> Result<String> {
    if layer >= rates.n_layers {
        return Err(Error::Param(format!("layer {layer} >= {}", rates.n_layers)));
    }
    let (n, l) = (rates.n_experts, rates.context_length);
    let cell_w = (800.0 / l as f64).max(0.5);
    let cell_h = (400.0 / n as f64).clamp(2.0, 24.0);
    let (left, top) = (50.0, 28.0);
    let width = left + cell_w * l as f64 + 70.0;
    let height = top + cell_h * n as f64 + 36.0;
    let max = (0..n)
        .flat_map(|e| rates.row(layer, e).iter().cloned())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let norm = match rates.normalization {
        crate::stats::Normalization::OverPositions => "over positions",
        crate::stats::Normalization::OverExperts => "over experts",
    };
    let mut s = svg_open(width, height, &format!("activation rates, layer {layer} (normalized {norm})"), deterministic);
    for e in 0..n {
        for (p, &r) in rates.row(layer, e).iter().enumerate() {
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"##,
                left + p as f64 * cell_w,
                top + e as f64 * cell_h,
                cell_w,
                cell_h,
                color(r / max)
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">position</text>"##,
        left + cell_w * l as f64 / 2.0,
        height - 8.0
    );
    let _ = writeln!(
        s,
        r##"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">expert</text>"##,
        top + cell_h * n as f64 / 2.0,
        top + cell_h * n as f64 / 2.0
    );
    let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}">max {:.3e}</text>"##, width - 66.0, top + 12.0, max);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Series of `(x, y)` points with a label.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart; `log_x` plots the x axis in log base 2.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool, deterministic: bool) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 120.0, 30.0, 40.0);
    let tx = |x: f64| if log_x { x.max(f64::MIN_POSITIVE).log2() } else { x };
    let pts = || series.iter().flat_map(|s| s.points.iter().cloned());
    let (x0, x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| (a.min(tx(x)), b.max(tx(x))));
    let (y0, y1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, y)| (a.min(y), b.max(y)));
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (0.0, 1.0) };
    let (y0, y1) = if y0.is_finite() && y1 > y0 { (y0.min(0.0), y1) } else { (0.0, 1.0) };
    let pw = width - left - right;
    let ph = height - top - bottom;
    let sx = |x: f64| left + (tx(x) - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = svg_open(width, height, title, deterministic);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"##, left - 4.0, sy(y) + 4.0, y);
    }
    let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"##, left + pw / 2.0, height - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r##"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"##,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    for (i, sr) in series.iter().enumerate() {
        let c = palette[i % palette.len()];
        let path: Vec<String> = sr.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"##, path.join(" "));
        for &(x, y) in &sr.points {
            let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"##, sx(x), sy(y));
        }
        let ly = top + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(s, r##"<text x="{:.1}" y="{ly:.1}" fill="{c}">{}</text>"##, width - right + 8.0, escape(&sr.label));
    }
    if log_x {
        for sr in series.iter().take(1) {
            for &(x, _) in &sr.points {
                let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"##, sx(x), top + ph + 14.0);
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// ξ against block size, one series per layer.
pub fn xi_chart_svg(rows: &[XiRow], deterministic: bool) -> String {
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let series: Vec<Series> = layers
        .iter()
        .map(|&l| Series {
            label: format!("layer {l}"),
            points: rows.iter().filter(|r| r.layer == l).map(|r| (r.n_block as f64, r.mean)).collect(),
        })
        .collect();
    line_chart_svg("correlation length", "block size", "xi", &series, true, deterministic)
}
