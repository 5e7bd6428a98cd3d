//! Figure emission: SVG line plots for fitted cycles and categorical PNG
//! rendering of partition labels.

use std::fmt::Write as _;
use std::path::Path;

use bdgp_core::grid::write_rgba_png;
use bdgp_core::partition::{Partition, BACKGROUND};
use bdgp_core::{Error, Result};

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Writes a minimal SVG line plot of (x, y) samples.
pub fn write_line_plot(
    points: &[(f64, f64)],
    title: &str,
    x_label: &str,
    y_label: &str,
    path: &Path,
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::NoValidData("cannot plot an empty curve".into()));
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    // pad the value axis
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (PLOT_W - 2.0 * MARGIN);
    let sy = |y: f64| PLOT_H - MARGIN - (y - y_min) / (y_max - y_min) * (PLOT_H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>"#,
        PLOT_W / 2.0
    );
    // axes
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = PLOT_H - MARGIN,
        r = PLOT_W - MARGIN,
        t = MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>"#,
        PLOT_W / 2.0,
        PLOT_H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {:.1})">{y_label}</text>"#,
        PLOT_H / 2.0,
        PLOT_H / 2.0
    );
    // tick labels at the axis extremes
    let _ = writeln!(
        svg,
        r#"<text x="{m}" y="{b2}" font-family="sans-serif" font-size="10">{x_min:.1}</text><text x="{r}" y="{b2}" text-anchor="end" font-family="sans-serif" font-size="10">{x_max:.1}</text>"#,
        m = MARGIN,
        b2 = PLOT_H - MARGIN + 16.0,
        r = PLOT_W - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{m2}" y="{b}" text-anchor="end" font-family="sans-serif" font-size="10">{y_min:.2}</text><text x="{m2}" y="{t}" text-anchor="end" font-family="sans-serif" font-size="10">{y_max:.2}</text>"#,
        m2 = MARGIN - 6.0,
        b = PLOT_H - MARGIN,
        t = MARGIN + 4.0
    );
    let mut d = String::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        let _ = write!(d, "{cmd}{:.2},{:.2} ", sx(x), sy(y));
    }
    let _ = writeln!(
        svg,
        r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        d.trim_end()
    );
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Deterministic categorical color for a region label (golden-angle hue
/// walk); the background renders mid-gray.
fn label_color(label: u32) -> [u8; 3] {
    if label == BACKGROUND {
        return [96, 96, 96];
    }
    let hue = (label as f64 * 137.50776405003785) % 360.0;
    let (h, s, v) = (hue / 60.0, 0.65, 0.92);
    let c = s * v;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Renders a partition as a categorical PNG.
pub fn render_labels(partition: &Partition, path: &Path) -> Result<()> {
    let geom = partition.geom();
    let mut rgba = vec![0u8; geom.n_pixels() * 4];
    for (i, &label) in partition.labels().iter().enumerate() {
        let [r, g, b] = label_color(label);
        rgba[4 * i] = r;
        rgba[4 * i + 1] = g;
        rgba[4 * i + 2] = b;
        rgba[4 * i + 3] = 0xff;
    }
    write_rgba_png(path, geom.n_cols as u32, geom.n_rows as u32, &rgba)
}
