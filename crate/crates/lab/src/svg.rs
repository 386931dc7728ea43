//! Self-contained SVG line plots: smoothed mean with a ±std band.

use std::fmt::Write as _;

use crate::compare::Comparison;

const W: f64 = 800.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLOURS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Trailing window mean.
pub fn smooth(values: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(width);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn plot(c: &Comparison, smooth_width: usize) -> String {
    let series: Vec<(&str, Vec<f64>, Vec<f64>, Vec<f64>)> = c
        .curves
        .iter()
        .map(|(label, pts)| {
            let x: Vec<f64> = pts.iter().map(|p| p.x).collect();
            let m = smooth(&pts.iter().map(|p| p.mean).collect::<Vec<_>>(), smooth_width);
            let s = smooth(&pts.iter().map(|p| p.std).collect::<Vec<_>>(), smooth_width);
            (label.as_str(), x, m, s)
        })
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (_, x, m, s) in &series {
        for i in 0..x.len() {
            x0 = x0.min(x[i]);
            x1 = x1.max(x[i]);
            y0 = y0.min(m[i] - s[i]);
            y1 = y1.max(m[i] + s[i]);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            H - BOTTOM + 18.0,
            tick(xv, x1 - x0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv, y1 - y0)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        c.equalize_by
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">mean return</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (label, x, m, s)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        if x.is_empty() {
            continue;
        }
        let mut band = String::new();
        for j in 0..x.len() {
            let _ = write!(band, "{:.2},{:.2} ", sx(x[j]), sy(m[j] + s[j]));
        }
        for j in (0..x.len()).rev() {
            let _ = write!(band, "{:.2},{:.2} ", sx(x[j]), sy(m[j] - s[j]));
        }
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="{colour}" fill-opacity="0.15" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = (0..x.len()).map(|j| format!("{:.2},{:.2}", sx(x[j]), sy(m[j]))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#,
            W - RIGHT + 12.0,
            W - RIGHT + 32.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            W - RIGHT + 38.0,
            ly + 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64, span: f64) -> String {
    if span >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}
