//! Minimal static SVG figures: scatter, line with error band, forest plot.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = write!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 14.0, escape(xlabel));
    let _ = write!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, x) in [(f.x0, MARGIN), (f.x1, W - MARGIN)] {
        let _ = write!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.3}</text>"#, H - MARGIN + 14.0);
    }
    for (v, y) in [(f.y0, H - MARGIN), (f.y1, MARGIN)] {
        let _ = write!(s, r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0);
    }
    s
}

pub fn scatter(points: &[(f64, f64)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let f = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut s = open(title, xlabel, ylabel, &f);
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let _ = write!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue" fill-opacity="0.6"/>"#, f.px(x), f.py(y));
    }
    s.push_str("</svg>\n");
    s
}

/// Line through `(x, y)` with a shaded `y ± err` band.
pub fn line_with_band(points: &[(f64, f64, f64)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let f = Frame::fit(
        points.iter().map(|p| p.0),
        points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]),
    );
    let mut s = open(title, xlabel, ylabel, &f);
    if !points.is_empty() {
        let upper: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.1 + p.2))).collect();
        let lower: Vec<String> = points.iter().rev().map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.1 - p.2))).collect();
        let _ = write!(s, r#"<polygon points="{} {}" fill="steelblue" fill-opacity="0.2"/>"#, upper.join(" "), lower.join(" "));
        let line: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.1))).collect();
        let _ = write!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, line.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

/// One forest-plot row: predicted point and interval against the published
/// point and interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ForestRow {
    pub label: String,
    pub predicted: (f64, f64, f64),
    pub published: (f64, f64, f64),
}

pub fn forest(rows: &[ForestRow], title: &str) -> String {
    let row_h = 18.0;
    let height = 2.0 * MARGIN + row_h * rows.len() as f64;
    let (x0, x1) = bounds(rows.iter().flat_map(|r| [r.predicted.1, r.predicted.2, r.published.1, r.published.2, 0.0]));
    let left = 200.0;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (W + 120.0 - left - MARGIN);
    let width = W + 120.0;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11"><rect width="{width}" height="{height}" fill="white"/><text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let _ = write!(
        s,
        r#"<line x1="{z:.2}" y1="{}" x2="{z:.2}" y2="{}" stroke="grey" stroke-dasharray="3,3"/>"#,
        MARGIN,
        height - MARGIN,
        z = px(0.0)
    );
    for (i, r) in rows.iter().enumerate() {
        let y = MARGIN + row_h * (i as f64 + 0.5);
        let _ = write!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, left - 8.0, y + 4.0, escape(&r.label));
        let (pp, pl, ph) = r.published;
        let _ = write!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="grey" stroke-width="6" stroke-opacity="0.4"/><rect x="{:.2}" y="{:.2}" width="4" height="8" fill="grey"/>"#,
            px(pl),
            px(ph),
            px(pp) - 2.0,
            y - 4.0
        );
        let (mp, ml, mh) = r.predicted;
        let _ = write!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="steelblue" stroke-width="1.5"/><circle cx="{:.2}" cy="{y:.2}" r="3" fill="steelblue"/>"#,
            px(ml),
            px(mh),
            px(mp)
        );
    }
    s.push_str("</svg>\n");
    s
}
