//! Self-contained SVG charts.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (mut x0, mut x1) = bounds(xs);
        let (mut y0, mut y1) = bounds(ys);
        if x1 <= x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = (y1 - y0) * 0.05;
        Self {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

fn header(s: &mut String, title: &str, x_label: &str, y_label: &str, f: &Frame) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, r - l, b - t);
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let (x, y) = (f.px(fx), f.py(fy));
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{b}" x2="{x:.1}" y2="{}" stroke="#444"/>"##, b + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, b + 17.0, tick(fx));
        let _ = writeln!(s, r##"<line x1="{}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="#444"/>"##, l - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 7.0, y + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (t + b) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, i: usize, label: &str) {
    let y = TOP + 14.0 + 18.0 * i as f64;
    let x = W - RIGHT + 14.0;
    let c = COLORS[i % COLORS.len()];
    let _ = writeln!(s, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#, x + 20.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 26.0, y + 4.0, escape(label));
}

/// One polyline per series with a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::new(
        series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)),
        series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)),
    );
    let mut s = String::new();
    header(&mut s, title, x_label, y_label, &f);
    for (i, (label, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            coords.join(" ")
        );
        legend(&mut s, i, label);
    }
    s.push_str("</svg>\n");
    s
}

/// Shaded p25..p75 envelopes with a p50 line, one per series, over a
/// shared index axis.
pub fn band_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64, f64)>)]) -> String {
    let f = Frame::new(
        series.iter().flat_map(|(_, b)| (0..b.len()).map(|i| (i + 1) as f64)),
        series.iter().flat_map(|(_, b)| b.iter().flat_map(|q| [q.0, q.2])),
    );
    let mut s = String::new();
    header(&mut s, title, x_label, y_label, &f);
    for (i, (label, bands)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let x = |j: usize| f.px((j + 1) as f64);
        let (upper, lower, mid): (Vec<_>, Vec<_>, Vec<_>) = if bands.len() == 1 {
            // A single pair still gets a visible segment.
            let (x0, x1) = (x(0) - 12.0, x(0) + 12.0);
            let (lo, med, hi) = bands[0];
            (
                vec![(x0, f.py(hi)), (x1, f.py(hi))],
                vec![(x1, f.py(lo)), (x0, f.py(lo))],
                vec![(x0, f.py(med)), (x1, f.py(med))],
            )
        } else {
            (
                bands.iter().enumerate().map(|(j, b)| (x(j), f.py(b.2))).collect(),
                bands.iter().enumerate().rev().map(|(j, b)| (x(j), f.py(b.0))).collect(),
                bands.iter().enumerate().map(|(j, b)| (x(j), f.py(b.1))).collect(),
            )
        };
        let poly: Vec<String> = upper.iter().chain(&lower).map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(s, r#"<polygon fill="{c}" fill-opacity="0.25" stroke="none" points="{}"/>"#, poly.join(" "));
        let line: Vec<String> = mid.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, line.join(" "));
        legend(&mut s, i, label);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let s = line_chart(
            "t",
            "x",
            "y",
            &[
                ("a<b".into(), vec![(0.0, 1.0), (1.0, 0.5)]),
                ("c".into(), vec![(0.0, 2.0), (1.0, 0.7)]),
            ],
        );
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("a&lt;b"));
        assert!(!s.contains("href"));
    }

    #[test]
    fn flat_band_at_one() {
        let s = band_chart("t", "x", "y", &[("enc".into(), vec![(1.0, 1.0, 1.0)])]);
        assert_eq!(s.matches("<polygon").count(), 1);
    }
}
