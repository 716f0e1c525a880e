//! Minimal SVG figures built from evaluation summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dpse_core::metrics::SummaryRow;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    top: f64,
}

impl Axes {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64, top: f64) -> Self {
        let (y0, y1) = if (y1 - y0).abs() < 1e-9 {
            (y0 - 1.0, y1 + 1.0)
        } else {
            (y0, y1)
        };
        let (x0, x1) = if (x1 - x0).abs() < 1e-9 {
            (x0 - 1.0, x1 + 1.0)
        } else {
            (x0, x1)
        };
        Self {
            x0,
            x1,
            y0,
            y1,
            top,
        }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        self.top + HEIGHT - MARGIN - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn frame(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, r) = (MARGIN, WIDTH - MARGIN);
        let (t, b) = (self.top + MARGIN, self.top + HEIGHT - MARGIN);
        let _ = writeln!(
            out,
            r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            r - l,
            b - t
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{title}</text>"#,
            WIDTH / 2.0,
            self.top + MARGIN / 2.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{x_label}</text>"#,
            WIDTH / 2.0,
            b + 32.0
        );
        let _ = writeln!(
            out,
            r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})" text-anchor="middle">{y_label}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0
        );
        for (v, label) in [(self.y0, self.y0), (self.y1, self.y1)] {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{label:.2}</text>"#,
                l - 4.0,
                self.y(v) + 3.0
            );
        }
    }

    fn x_tick(&self, out: &mut String, v: f64) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{v}</text>"#,
            self.x(v),
            self.top + HEIGHT - MARGIN + 14.0
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn parse_bin(s: &str) -> Option<i32> {
    s.parse().ok()
}

/// Per-tag mean output SNR against input-SNR bin, and STOI box glyphs per bin.
pub fn figures(summary: &[SummaryRow]) -> String {
    let mut curves: BTreeMap<&str, Vec<(i32, f64)>> = BTreeMap::new();
    let mut boxes: Vec<(i32, &SummaryRow)> = Vec::new();
    for row in summary {
        if let Some(rest) = row.group.strip_prefix("tag=") {
            if let Some((tag, bin)) = rest.split_once(",snr=") {
                if row.metric == "output_snr_db" {
                    if let Some(b) = parse_bin(bin) {
                        curves.entry(tag).or_default().push((b, row.mean));
                    }
                }
            }
        } else if let Some(bin) = row.group.strip_prefix("snr=") {
            if row.metric == "stoi_out" {
                if let Some(b) = parse_bin(bin) {
                    boxes.push((b, row));
                }
            }
        }
    }
    for points in curves.values_mut() {
        points.sort_by_key(|p| p.0);
    }
    boxes.sort_by_key(|b| b.0);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{}">"#,
        2.0 * HEIGHT
    );

    let ys: Vec<f64> = curves.values().flatten().map(|p| p.1).collect();
    let (lo, hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (lo, hi) = if ys.is_empty() { (0.0, 1.0) } else { (lo, hi) };
    let axes = Axes::new(-10.0, 10.0, lo, hi, 0.0);
    out.push_str("<g id=\"snr-by-tag\">\n");
    axes.frame(
        &mut out,
        "Output SNR by noise type",
        "input SNR (dB)",
        "mean output SNR (dB)",
    );
    for b in [-10, -5, 0, 5, 10] {
        axes.x_tick(&mut out, b as f64);
    }
    for (i, (tag, points)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let tag = escape(tag);
        let pts: Vec<String> = points
            .iter()
            .map(|&(b, v)| format!("{:.1},{:.1}", axes.x(b as f64), axes.y(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-tag="{tag}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{tag}</text>"#,
            WIDTH - MARGIN + 4.0,
            MARGIN + 12.0 * (i as f64 + 1.0)
        );
    }
    out.push_str("</g>\n");

    let (lo, hi) = boxes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, r)| {
            (a.min(r.min), b.max(r.max))
        });
    let (lo, hi) = if boxes.is_empty() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    };
    let axes = Axes::new(-12.5, 12.5, lo, hi, HEIGHT);
    out.push_str("<g id=\"stoi-by-snr\">\n");
    axes.frame(&mut out, "STOI by input SNR", "input SNR (dB)", "STOI");
    let half = (axes.x(1.5) - axes.x(0.0)).abs();
    for (bin, r) in &boxes {
        let cx = axes.x(*bin as f64);
        axes.x_tick(&mut out, *bin as f64);
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            axes.y(r.min),
            axes.y(r.max)
        );
        let _ = writeln!(
            out,
            r##"<rect data-bin="{bin}" x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            axes.y(r.q3),
            2.0 * half,
            (axes.y(r.q1) - axes.y(r.q3)).max(0.5)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            axes.y(r.median),
            cx + half,
            axes.y(r.median)
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(group: &str, metric: &str, v: f64) -> SummaryRow {
        SummaryRow {
            group: group.into(),
            metric: metric.into(),
            n: 1,
            mean: v,
            min: v - 0.1,
            q1: v - 0.05,
            median: v,
            q3: v + 0.05,
            max: v + 0.1,
        }
    }

    #[test]
    fn one_polyline_per_tag_and_one_box_per_bin() {
        let summary = vec![
            row("snr=-5", "stoi_out", 0.6),
            row("snr=5", "stoi_out", 0.8),
            row("tag=hum,snr=-5", "output_snr_db", 1.0),
            row("tag=hum,snr=5", "output_snr_db", 6.0),
            row("tag=wind,snr=5", "output_snr_db", 7.0),
            row("tag=wind,snr=5", "stoi_out", 7.0),
        ];
        let svg = figures(&summary);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<rect data-bin").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_summary_still_renders() {
        let svg = figures(&[]);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert!(svg.contains("</svg>"));
    }
}
