//! Minimal SVG line plots for reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series], hline: Option<f64>) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(h) = hline {
        y0 = y0.min(h);
        y1 = y1.max(h);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

/// Renders one or more series on shared axes, with an optional horizontal
/// reference line.
pub fn line_plot(title: &str, x_label: &str, series: &[Series], hline: Option<(&str, f64)>) -> String {
    let (x0, x1, y0, y1) = bounds(series, hline.map(|h| h.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="black" points="{m},{t} {m},{b} {r},{b}"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    for (v, y) in [(y0, H - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{v:.4}</text>"#, MARGIN - 4.0);
    }
    for (v, x) in [(x0, MARGIN), (x1, W - MARGIN)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v}</text>"#, H - MARGIN + 16.0);
    }
    if let Some((label, h)) = hline {
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="gray" stroke-dasharray="4 3"/><text x="{}" y="{:.2}" fill="gray">{}</text>"#,
            MARGIN,
            W - MARGIN,
            W - MARGIN - 60.0,
            sy(h) - 4.0,
            escape(label),
            y = sy(h)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            MARGIN + 8.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_contains_every_series_and_is_deterministic() {
        let series = [
            Series {
                label: "a",
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            },
            Series {
                label: "b<c",
                points: vec![(0.0, 0.5), (1.0, f64::NAN)],
            },
        ];
        let a = line_plot("t", "x", &series, Some(("T", 1.5)));
        assert_eq!(a, line_plot("t", "x", &series, Some(("T", 1.5))));
        assert_eq!(a.matches("<polyline").count(), 3);
        assert!(a.contains("b&lt;c"));
        assert!(a.ends_with("</svg>\n"));
    }
}
