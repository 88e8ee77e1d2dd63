//! Minimal SVG charts: line panels and labelled scatter plots.

use std::fmt::Write;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#393b79", "#000000",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// `(tick label, y)` pairs placed at equally spaced x positions.
    pub points: Vec<(String, f64)>,
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.08 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Panels side by side, each 360×300.
pub fn line_panels(panels: &[Panel]) -> String {
    let (pw, ph) = (360.0, 300.0);
    let (ml, mr, mt, mb) = (60.0, 15.0, 30.0, 50.0);
    let width = pw * panels.len() as f64;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{ph}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (pi, panel) in panels.iter().enumerate() {
        let ox = pi as f64 * pw;
        let (x0, x1, y0, y1) = (ox + ml, ox + pw - mr, mt, ph - mb);
        let (lo, hi) = bounds(panel.points.iter().map(|p| p.1));
        let n = panel.points.len().max(1);
        let px = |i: usize| if n == 1 { (x0 + x1) / 2.0 } else { x0 + (x1 - x0) * i as f64 / (n - 1) as f64 };
        let py = |v: f64| y1 - (y1 - y0) * (v - lo) / (hi - lo);
        writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, (x0 + x1) / 2.0, escape(&panel.title)).unwrap();
        writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
        for t in 0..=4 {
            let v = lo + (hi - lo) * t as f64 / 4.0;
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, py(v) + 4.0).unwrap();
        }
        for (i, (label, _)) in panel.points.iter().enumerate() {
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(i), y1 + 15.0, escape(label)).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, ph - 10.0, escape(&panel.x_label)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#, ox + 14.0, (y0 + y1) / 2.0, ox + 14.0, (y0 + y1) / 2.0, escape(&panel.y_label)).unwrap();
        let path: Vec<String> = panel.points.iter().enumerate().map(|(i, p)| format!("{:.2},{:.2}", px(i), py(p.1))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, PALETTE[0], path.join(" ")).unwrap();
        for (i, p) in panel.points.iter().enumerate() {
            writeln!(s, r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3.5" fill="{}"/>"#, px(i), py(p.1), PALETTE[0]).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of 2-D points; each point is drawn as its class number so the
/// unknown class shows up as marker `k`.
pub fn labelled_scatter(title: &str, points: &[[f64; 2]], labels: &[u32]) -> String {
    let (w, h, m) = (640.0, 640.0, 40.0);
    let (xlo, xhi) = bounds(points.iter().map(|p| p[0]));
    let (ylo, yhi) = bounds(points.iter().map(|p| p[1]));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="9">"#, h + 30.0).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title)).unwrap();
    for (p, &l) in points.iter().zip(labels) {
        let x = m + (w - 2.0 * m) * (p[0] - xlo) / (xhi - xlo);
        let y = 30.0 + h - m - (h - 2.0 * m) * (p[1] - ylo) / (yhi - ylo);
        writeln!(s, r#"<text class="marker" x="{x:.1}" y="{y:.1}" fill="{}" text-anchor="middle">{l}</text>"#, PALETTE[l as usize % PALETTE.len()]).unwrap();
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for (i, c) in classes.iter().enumerate() {
        writeln!(s, r#"<text x="{}" y="{}" fill="{}">marker {c}</text>"#, w - 70.0, 40.0 + 12.0 * i as f64, PALETTE[*c as usize % PALETTE.len()]).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
