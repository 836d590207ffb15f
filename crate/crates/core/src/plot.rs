//! Minimal static SVG charts for reports.

use std::fmt::Write as _;

use crate::eval::{BandPoint, PairAccuracyStats, RocCurve};

const SIZE: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn sx(v: f64) -> f64 {
    MARGIN + v * SIZE
}

fn sy(v: f64) -> f64 {
    MARGIN + (1.0 - v) * SIZE
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let total = SIZE + 2.0 * MARGIN;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{cx}" y="25" text-anchor="middle" font-size="14">{title}</text>
<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>
<text x="{cx}" y="{xl}" text-anchor="middle">{x_label}</text>
<text x="15" y="{cx}" text-anchor="middle" transform="rotate(-90 15 {cx})">{y_label}</text>
"#,
        cx = total / 2.0,
        xl = total - 10.0,
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{v}</text><text x="{}" y="{}" text-anchor="end">{v}</text>"#,
            sx(v),
            MARGIN + SIZE + 15.0,
            MARGIN - 5.0,
            sy(v) + 4.0
        );
    }
    s
}

/// ROC chart: mean FPR-at-TPR with a ±1 std band, one series per entry.
pub fn roc_band_svg(title: &str, series: &[(String, Vec<BandPoint>)]) -> String {
    let mut s = frame(title, "False Positive Rate", "True Positive Rate");
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4"/>"#,
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    );
    for (i, (name, band)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut poly = String::new();
        for b in band {
            let _ = write!(poly, "{:.2},{:.2} ", sx((b.mean_fpr - b.std_fpr).clamp(0.0, 1.0)), sy(b.tpr));
        }
        for b in band.iter().rev() {
            let _ = write!(poly, "{:.2},{:.2} ", sx((b.mean_fpr + b.std_fpr).clamp(0.0, 1.0)), sy(b.tpr));
        }
        let _ = writeln!(s, r#"<polygon points="{poly}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#);
        let line: String = band
            .iter()
            .map(|b| format!("{:.2},{:.2} ", sx(b.mean_fpr), sy(b.tpr)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            sx(0.55),
            sy(0.1) + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Single-run ROC curve.
pub fn roc_svg(title: &str, curve: &RocCurve) -> String {
    let mut s = frame(title, "False Positive Rate", "True Positive Rate");
    let line: String = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2} ", sx(p.fpr), sy(p.tpr)))
        .collect();
    let _ = writeln!(s, r#"<polyline points="{line}" fill="none" stroke="{}" stroke-width="2"/>"#, COLORS[0]);
    s.push_str("</svg>\n");
    s
}

/// Per-family histograms of per-pair accuracy, drawn as overlaid outlines.
pub fn histogram_svg(title: &str, stats: &PairAccuracyStats) -> String {
    let mut s = frame(title, "Pair accuracy", "Fraction of pairs");
    let bins = stats.bins as f64;
    for (i, (family, counts)) in stats.histograms.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let total: usize = counts.iter().sum();
        for (b, &c) in counts.iter().enumerate() {
            let frac = c as f64 / total.max(1) as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.35" stroke="{color}"/>"#,
                sx(b as f64 / bins),
                sy(frac),
                SIZE / bins,
                frac * SIZE
            );
        }
        let mean = stats.family_means.get(family).copied().unwrap_or(0.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{family} (mean {:.3})</text>"#,
            sx(0.05),
            sy(0.95) + 16.0 * i as f64,
            mean
        );
    }
    s.push_str("</svg>\n");
    s
}
