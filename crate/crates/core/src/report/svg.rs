//! Minimal deterministic SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        };
        let (mut x0, mut x1) = span(&mut xs.clone());
        let (mut y0, mut y1) = span(&mut ys.clone());
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        y0 = y0.min(0.0);
        y1 = y1.max(0.0);
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        Self { x0, x1, y0: y0 - pad, y1: y1 + pad }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ =
        writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#333333"/>"##, r - l, b - t);
    for k in 0..=4 {
        let y = frame.y0 + (frame.y1 - frame.y0) * f64::from(k) / 4.0;
        let py = frame.py(y);
        let _ = writeln!(s, r##"<line x1="{l}" y1="{py:.2}" x2="{r}" y2="{py:.2}" stroke="#dddddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#, l - 4.0, py + 4.0);
        let x = frame.x0 + (frame.x1 - frame.x0) * f64::from(k) / 4.0;
        let px = frame.px(x);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{x:.3}</text>"#, b + 16.0);
    }
    if frame.y0 < 0.0 && frame.y1 > 0.0 {
        let z = frame.py(0.0);
        let _ = writeln!(s, r##"<line x1="{l}" y1="{z:.2}" x2="{r}" y2="{z:.2}" stroke="#333333"/>"##);
    }
    let _ =
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s
}

/// Bars at integer positions `1..=n` with optional symmetric error bars.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, values: &[f64], errors: &[f64]) -> String {
    let n = values.len();
    let hi = values.iter().zip(errors).map(|(v, e)| v + e.max(0.0));
    let lo = values.iter().zip(errors).map(|(v, e)| v - e.max(0.0));
    let frame = Frame::new([0.5, n as f64 + 0.5].into_iter(), hi.chain(lo).chain(values.iter().copied()));
    let mut s = open(title, &frame, x_label, y_label);
    let half = 0.35 * (frame.px(1.0) - frame.px(0.0));
    for (k, (&v, &e)) in values.iter().zip(errors).enumerate() {
        if !v.is_finite() {
            continue;
        }
        let cx = frame.px((k + 1) as f64);
        let (ya, yb) = (frame.py(v.max(0.0)), frame.py(v.min(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            cx - half,
            2.0 * half,
            yb - ya,
            PALETTE[0]
        );
        if e.is_finite() && e > 0.0 {
            let (ea, eb) = (frame.py(v + 1.96 * e), frame.py(v - 1.96 * e));
            let _ = writeln!(s, r##"<line x1="{cx:.2}" y1="{ea:.2}" x2="{cx:.2}" y2="{eb:.2}" stroke="#000000"/>"##);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per named series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let frame = Frame::new(pts.clone().map(|p| p.0), pts.map(|p| p.1));
    let mut s = open(title, &frame, x_label, y_label);
    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        let ly = TOP + 14.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" fill="{color}">{}</text>"#, W - RIGHT - 140.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Histogram over `edges` with an optional vertical reference line.
pub fn histogram(title: &str, x_label: &str, edges: &[f64], density: &[f64], vline: Option<f64>) -> String {
    let frame = Frame::new(edges.iter().copied(), density.iter().copied());
    let mut s = open(title, &frame, x_label, "density");
    for (k, &d) in density.iter().enumerate() {
        let (xa, xb) = (frame.px(edges[k]), frame.px(edges[k + 1]));
        let (ya, yb) = (frame.py(d), frame.py(0.0));
        let _ = writeln!(
            s,
            r##"<rect x="{xa:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="#ffffff"/>"##,
            xb - xa,
            yb - ya,
            PALETTE[0]
        );
    }
    if let Some(v) = vline.filter(|v| v.is_finite()) {
        let x = frame.px(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="{}" stroke-width="2"/>"#,
            H - BOTTOM,
            PALETTE[1]
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let b = bar_chart("t", "x", "y", &[-0.3, -0.1, f64::NAN], &[0.01, 0.02, 0.0]);
        assert!(b.starts_with("<svg") && b.ends_with("</svg>\n"));
        assert_eq!(b.matches("<rect").count(), 2 + 2);
        let l = line_chart("t<", "x", "y", &[("a&b".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(l.contains("t&lt;") && l.contains("a&amp;b"));
        let h = histogram("t", "x", &[0.0, 1.0, 2.0], &[0.5, 0.5], Some(1.0));
        assert_eq!(h, histogram("t", "x", &[0.0, 1.0, 2.0], &[0.5, 0.5], Some(1.0)));
    }
}
