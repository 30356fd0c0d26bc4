//! Self-contained SVG line plots of logged CSV columns.
//!
//! Every non-`step` column of every input CSV becomes one polyline (or only
//! the requested columns). The y-range is the data range padded by 5% on
//! both sides.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::csvlog::read_table;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const LEGEND: f64 = 150.0;
const COLOURS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// `[min, max]` padded by 5% of the span; a flat series gets ±1.
pub fn y_range(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return None;
    }
    if hi == lo {
        return Some((lo - 1.0, hi + 1.0));
    }
    let pad = 0.05 * (hi - lo);
    Some((lo - pad, hi + pad))
}

/// Series from CSV files. Labels are the column headers, prefixed with the
/// file stem when more than one file is given.
pub fn load_series(csv_paths: &[&Path], columns: Option<&[String]>) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for path in csv_paths {
        let t = read_table(path)?;
        if t.rows.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no data rows", path.display())));
        }
        let step = t
            .column("step")
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no step column", path.display())))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (ci, name) in t.headers.iter().enumerate() {
            if ci == step || columns.is_some_and(|c| !c.contains(name)) {
                continue;
            }
            let points: Vec<(f64, f64)> = t
                .rows
                .iter()
                .filter_map(|r| Some((r[step]?, r.get(ci).copied().flatten()?)))
                .collect();
            if points.is_empty() {
                continue;
            }
            let label = if csv_paths.len() > 1 { format!("{stem}:{name}") } else { name.clone() };
            out.push(Series { label, points });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    Ok(out)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(series: &[Series], y_label: &str) -> Result<String> {
    let (ylo, yhi) = y_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)))
        .ok_or_else(|| Error::InvalidArgument("nothing to plot".into()))?;
    let (xlo, xhi) = {
        let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let (l, h) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        if l == h { (l - 1.0, h + 1.0) } else { (l, h) }
    };
    let pw = W - 2.0 * MARGIN;
    let ph = H - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - xlo) / (xhi - xlo) * pw;
    let sy = |y: f64| H - MARGIN - (y - ylo) / (yhi - ylo) * ph;

    let mut s = String::new();
    let total_w = W + LEGEND;
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{H}" viewBox="0 0 {total_w} {H}">"#
    )
    .ok();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).ok();
    writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}"/></g>"#,
        b = H - MARGIN,
        r = W - MARGIN
    )
    .ok();
    writeln!(
        s,
        r#"<g font-family="sans-serif" font-size="11"><text x="{MARGIN}" y="{}" >{xlo}</text><text x="{}" y="{}" text-anchor="end">{xhi}</text><text x="{}" y="{}" text-anchor="end">{ylo:.4}</text><text x="{}" y="{}" text-anchor="end">{yhi:.4}</text></g>"#,
        H - MARGIN + 15.0,
        W - MARGIN,
        H - MARGIN + 15.0,
        MARGIN - 4.0,
        H - MARGIN,
        MARGIN - 4.0,
        MARGIN + 4.0,
    )
    .ok();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">step</text>"#,
        MARGIN + pw / 2.0,
        H - 15.0
    )
    .ok();
    writeln!(
        s,
        r#"<text x="15" y="{y}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 15 {y})">{}</text>"#,
        esc(y_label),
        y = MARGIN + ph / 2.0
    )
    .ok();
    for (i, ser) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .ok();
        let ly = MARGIN + 18.0 * i as f64;
        writeln!(
            s,
            r#"<g class="legend"><line x1="{x0}" y1="{ly}" x2="{x1}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{tx}" y="{ty}" font-family="sans-serif" font-size="11">{}</text></g>"#,
            esc(&ser.label),
            x0 = W,
            x1 = W + 20.0,
            tx = W + 25.0,
            ty = ly + 4.0
        )
        .ok();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders CSV columns to an SVG file.
pub fn emit_plot(csv_paths: &[&Path], columns: Option<&[String]>, out_svg: &Path) -> Result<()> {
    let series = load_series(csv_paths, columns)?;
    let label = match columns {
        Some([one]) => one.clone(),
        _ => "value".to_string(),
    };
    std::fs::write(out_svg, render_svg(&series, &label)?).map_err(|e| Error::io(out_svg, e))
}
