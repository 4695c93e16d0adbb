//! Static depth-profile charts: depth grows downward, the parameter value
//! runs left to right.

use std::fmt::Write;

use super::PointResult;

const WIDTH: f64 = 420.0;
const HEIGHT: f64 = 520.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// One chart: a shaded 95% band and a mean line per series, truth as dots.
pub fn profile_svg(title: &str, series: &[(String, Vec<PointResult>)]) -> String {
    let all = || series.iter().flat_map(|(_, pts)| pts.iter());
    let (v0, v1) = bounds(all().flat_map(|p| [p.q025, p.q975, p.truth, p.mean]));
    let (d0, d1) = bounds(all().map(|p| p.depth));
    let sx = |v: f64| MARGIN + (v - v0) / (v1 - v0) * (WIDTH - 2.0 * MARGIN);
    let sy = |d: f64| MARGIN + (d - d0) / (d1 - d0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (v, d) = (v0 + f * (v1 - v0), d0 + f * (d1 - d0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, sx(v), t - 6.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{d:.1}</text>"#, l - 4.0, sy(d) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">depth (m)</text>"#, HEIGHT / 2.0, HEIGHT / 2.0);

    for (k, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut sorted: Vec<&PointResult> = pts.iter().collect();
        sorted.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        let band: Vec<String> = sorted
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.q025), sy(p.depth)))
            .chain(sorted.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.q975), sy(p.depth))))
            .collect();
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = sorted.iter().map(|p| format!("{:.2},{:.2}", sx(p.mean), sy(p.depth))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#, line.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            l + 6.0,
            b + 16.0 + 13.0 * k as f64,
            escape(label)
        );
    }
    if let Some((_, pts)) = series.first() {
        for p in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.6" fill="black"/>"#, sx(p.truth), sy(p.depth));
        }
    }
    s.push_str("</svg>\n");
    s
}
