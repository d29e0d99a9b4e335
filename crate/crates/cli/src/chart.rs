//! Static SVG line charts. Output depends only on the input values, so a
//! chart regenerated from an unchanged run is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Pads a degenerate range so every point maps inside the plot area.
fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders one polyline per series with axes, tick labels and a legend in
/// input order. Non-finite points are dropped.
pub fn render_chart(title: &str, x_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        bail!("chart needs at least one series");
    }
    let cleaned: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect())
        .collect();
    if let Some(i) = cleaned.iter().position(Vec::is_empty) {
        bail!("series {:?} has no finite points", series[i].label);
    }
    let all = || cleaned.iter().flatten();
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#)?;
    writeln!(
        svg,
        r#"<text x="{:.1}" y="18" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    )?;
    writeln!(svg, r#"<g class="axes" stroke="black" stroke-width="1">"#)?;
    writeln!(svg, r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/>"#, TOP + ph, LEFT + pw, TOP + ph)?;
    writeln!(svg, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}"/>"#, TOP + ph)?;
    writeln!(svg, "</g>")?;
    writeln!(svg, r#"<g class="ticks" font-family="sans-serif" font-size="10">"#)?;
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        writeln!(
            svg,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + ph + 15.0,
            label(xv)
        )?;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            py + 3.0,
            label(yv)
        )?;
    }
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    )?;
    writeln!(svg, "</g>")?;
    for (i, pts) in cleaned.iter().enumerate() {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            coords.join(" ")
        )?;
    }
    writeln!(svg, r#"<g class="legend" font-family="sans-serif" font-size="11">"#)?;
    for (i, s) in series.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = LEFT + pw + 15.0;
        writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"/>"#,
            x + 20.0,
            COLORS[i % COLORS.len()]
        )?;
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 25.0, y + 4.0, escape(&s.label))?;
    }
    writeln!(svg, "</g>")?;
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_chart(title: &str, x_label: &str, series: &[Series], path: &Path) -> Result<()> {
    let svg = render_chart(title, x_label, series)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, svg)?;
    Ok(())
}
