//! Self-contained SVG line chart for sweep results.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy (percent) against PoT ratio (percent), with an optional
/// horizontal reference line.
pub fn line_chart(title: &str, series: &[Series], reference: Option<(&str, f64)>) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 20.0, 40.0, 50.0);
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(reference.map(|r| r.1))
        .collect();
    let mut lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (lo, hi) = (0.0, 100.0);
    }
    if hi - lo < 1.0 {
        lo -= 0.5;
        hi += 0.5;
    }
    let px = |x: f64| left + x / 100.0 * (w - left - right);
    let py = |y: f64| top + (hi - y) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let (x0, x1, y0, y1) = (px(0.0), px(100.0), py(lo), py(hi));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for t in (0..=100).step_by(10) {
        let x = px(t as f64);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{t}</text>"#, y0 + 16.0);
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x0 - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">PoT-W4A4 ratio (%)</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">top-1 accuracy (%)</text>"#,
        h / 2.0,
        h / 2.0
    );
    let mut legend_y = top + 10.0;
    if let Some((label, v)) = reference {
        let y = py(v);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="gray" stroke-dasharray="4 3"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{legend_y}" fill="gray">{}</text>"#, x1 - 150.0, escape(label));
        legend_y += 16.0;
    }
    for series in series {
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            series.color,
            pts.join(" ")
        );
        for &(x, y) in &series.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, px(x), py(y), series.color);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{legend_y}" fill="{}">{}</text>"#,
            x1 - 150.0,
            series.color,
            escape(&series.label)
        );
        legend_y += 16.0;
    }
    s.push_str("</svg>\n");
    s
}
