//! Standalone SVG scatter plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{AnalysisError, Projection2D};

/// Marker colours, assigned to labels in sorted order and cycled past 22.
pub const PALETTE: [&str; 22] = [
    "#222222", "#F3C300", "#875692", "#F38400", "#A1CAF1", "#BE0032", "#C2B280", "#848482", "#008856", "#E68FAC",
    "#0067A5", "#F99379", "#604E97", "#F6A600", "#B3446C", "#DCD300", "#882D17", "#8DB600", "#654522", "#E25822",
    "#2B3D26", "#1F77B4",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 140.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the projection. Output depends only on the input.
pub fn render_scatter_svg(projection: &Projection2D) -> String {
    let colours: BTreeMap<&str, &str> = {
        let mut names: Vec<&str> = projection.labels.iter().map(String::as_str).collect();
        names.sort_unstable();
        names.dedup();
        names.into_iter().enumerate().map(|(i, l)| (l, PALETTE[i % PALETTE.len()])).collect()
    };
    let pts = &projection.points;
    let range = |axis: usize| {
        let (lo, hi) = pts
            .column(axis)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 1.0, lo + 1.0)
        } else {
            (-1.0, 1.0)
        }
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let total_w = WIDTH + LEGEND_WIDTH;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{HEIGHT}" viewBox="0 0 {total_w} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{total_w}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1"><line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}"/></g>"#,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(s, r#"<g stroke="none" fill-opacity="0.85">"#);
    for (row, label) in pts.rows().into_iter().zip(&projection.labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="3.5" fill="{}"/>"#,
            sx(row[0]),
            sy(row[1]),
            colours[label.as_str()]
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="12">"#);
    for (i, (label, colour)) in colours.iter().enumerate() {
        let y = MARGIN + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend"><rect x="{lx}" y="{ry}" width="10" height="10" fill="{colour}"/><text x="{tx}" y="{ty}">{}</text></g>"#,
            escape(label),
            lx = WIDTH,
            ry = y - 9.0,
            tx = WIDTH + 16.0,
            ty = y,
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

pub fn emit_scatter_svg(projection: &Projection2D, path: &Path) -> Result<(), AnalysisError> {
    std::fs::write(path, render_scatter_svg(projection))?;
    Ok(())
}
