use std::fmt::Write;

use crate::train::MetricsRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const PAD: f64 = 48.0;

/// Name, stroke color and value of one plotted curve.
type Series = (&'static str, &'static str, fn(&MetricsRow) -> f64);

/// Loss curves of a training run as a standalone SVG.
pub fn loss_svg(rows: &[MetricsRow]) -> String {
    let series: [Series; 4] = [
        ("total", "#1f77b4", |r| r.loss_total),
        ("align", "#ff7f0e", |r| r.loss_align),
        ("logdet z", "#2ca02c", |r| r.loss_z),
        ("logdet z'", "#d62728", |r| r.loss_zp),
    ];
    let finite = rows
        .iter()
        .flat_map(|r| series.iter().map(move |(_, _, f)| f(r)))
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let last_step = rows.last().map_or(1, |r| r.step.max(1)) as f64;
    let x = |step: u64| PAD + (WIDTH - 2.0 * PAD) * step as f64 / last_step;
    let y = |v: f64| HEIGHT - PAD - (HEIGHT - 2.0 * PAD) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = HEIGHT - PAD,
        r = WIDTH - PAD
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}">{hi:.4}</text>"#, 4.0, PAD);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">{lo:.4}</text>"#,
        4.0,
        HEIGHT - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end">step {}</text>"#,
        WIDTH - PAD,
        HEIGHT - PAD + 16.0,
        last_step
    );
    for (i, (name, color, f)) in series.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .filter(|r| f(r).is_finite())
            .map(|r| format!("{:.2},{:.2}", x(r.step), y(f(r))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#,
            WIDTH - PAD - 60.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
