//! Static SVG renderings of metric and diagnostic reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use imss_core::eval::MetricsReport;

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(width: f64, height: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14" font-weight="bold">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    s
}

fn legend(s: &mut String, x: f64, y: f64, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, yy - 9.0, color(i));
        let _ = writeln!(s, r#"<text x="{}" y="{yy}">{}</text>"#, x + 14.0, escape(n));
    }
}

/// Grouped bars: one group per scale, one bar per modality.
pub fn robustness_bars(per_scale: &[BTreeMap<String, f64>], modalities: &[String]) -> String {
    let (w, h) = (120.0 + 140.0 * per_scale.len().max(1) as f64, 320.0);
    let (left, top, plot_h) = (50.0, 40.0, 220.0);
    let mut s = open(w, h, "Mean robustness per scale");
    let max = per_scale
        .iter()
        .flat_map(|m| m.values().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + plot_h);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        w - 100.0,
        top + plot_h
    );
    for tick in 0..=4 {
        let v = max * tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - tick as f64 / 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    let bar = 100.0 / modalities.len().max(1) as f64;
    for (si, scale) in per_scale.iter().enumerate() {
        let gx = left + 20.0 + 140.0 * si as f64;
        for (mi, m) in modalities.iter().enumerate() {
            let v = scale.get(m).copied().unwrap_or(0.0);
            let bh = plot_h * v / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {v:.4}</title></rect>"#,
                gx + bar * mi as f64,
                top + plot_h - bh,
                bar - 2.0,
                bh,
                color(mi),
                escape(m)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">scale {}</text>"#,
            gx + 50.0,
            top + plot_h + 18.0,
            si + 1
        );
    }
    legend(&mut s, w - 90.0, top + 10.0, modalities);
    s.push_str("</svg>\n");
    s
}

/// One axis per class, one polygon per scale; each scale is scaled to its own maximum.
pub fn variance_radar(per_scale: &[Vec<Option<f64>>]) -> String {
    let (w, h) = (460.0, 400.0);
    let (cx, cy, radius) = (200.0, 210.0, 150.0);
    let mut s = open(w, h, "Intra-class variance (relative, per scale)");
    let k = per_scale.first().map_or(0, |v| v.len());
    if k == 0 {
        s.push_str("</svg>\n");
        return s;
    }
    let angle = |i: usize| -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / k as f64;
    for ring in 1..=4 {
        let r = radius * ring as f64 / 4.0;
        let pts: Vec<String> = (0..k)
            .map(|i| format!("{:.1},{:.1}", cx + r * angle(i).cos(), cy + r * angle(i).sin()))
            .collect();
        let _ = writeln!(s, r##"<polygon points="{}" fill="none" stroke="#ccc"/>"##, pts.join(" "));
    }
    for i in 0..k {
        let (x, y) = (cx + radius * angle(i).cos(), cy + radius * angle(i).sin());
        let _ = writeln!(s, r##"<line x1="{cx}" y1="{cy}" x2="{x:.1}" y2="{y:.1}" stroke="#999"/>"##);
        let (lx, ly) = (cx + (radius + 16.0) * angle(i).cos(), cy + (radius + 16.0) * angle(i).sin());
        let _ = writeln!(s, r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle">class {i}</text>"#);
    }
    let mut names = Vec::new();
    for (si, vals) in per_scale.iter().enumerate() {
        let max = vals.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-12);
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let r = radius * v.unwrap_or(0.0) / max;
                format!("{:.1},{:.1}", cx + r * angle(i).cos(), cy + r * angle(i).sin())
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{}" fill-opacity="0.15" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            color(si),
            color(si)
        );
        names.push(format!("scale {}", si + 1));
    }
    legend(&mut s, w - 80.0, 50.0, &names);
    s.push_str("</svg>\n");
    s
}

/// Per-subset mIoU and F1 with the aggregates, values in percent.
pub fn metrics_table(report: &MetricsReport) -> String {
    let row_h = 22.0;
    let rows = report.subsets.len() + 3;
    let (w, h) = (420.0, 50.0 + row_h * (rows + 1) as f64);
    let mut s = open(w, h, "Per-subset metrics (%)");
    let cols = [20.0, 260.0, 340.0];
    let mut y = 50.0;
    for (x, head) in cols.iter().zip(["subset", "mIoU", "F1"]) {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" font-weight="bold">{head}</text>"#);
    }
    let _ = writeln!(s, r#"<line x1="10" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, y + 6.0, w - 10.0, y + 6.0);
    let line = |s: &mut String, y: f64, name: &str, a: f64, b: f64, bold: bool| {
        let weight = if bold { r#" font-weight="bold""# } else { "" };
        let _ = writeln!(s, r#"<text x="{}" y="{y}"{weight}>{}</text>"#, cols[0], escape(name));
        let _ = writeln!(s, r#"<text x="{}" y="{y}"{weight}>{:.2}</text>"#, cols[1], 100.0 * a);
        let _ = writeln!(s, r#"<text x="{}" y="{y}"{weight}>{:.2}</text>"#, cols[2], 100.0 * b);
    };
    for sub in &report.subsets {
        y += row_h;
        line(&mut s, y, &sub.id, sub.miou, sub.f1, false);
    }
    for (name, a, b) in [
        ("Average", report.miou.average, report.f1.average),
        ("Top-1", report.miou.top1, report.f1.top1),
        ("Last-1", report.miou.last1, report.f1.last1),
    ] {
        y += row_h;
        line(&mut s, y, name, a, b, true);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_are_proportional() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), 0.25);
        m.insert("b".to_string(), 0.75);
        let svg = robustness_bars(&[m], &["a".into(), "b".into()]);
        assert!(svg.contains(r#"height="73.3""#));
        assert!(svg.contains(r#"height="220.0""#));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn radar_has_one_polygon_per_scale() {
        let svg = variance_radar(&[vec![Some(1.0), Some(2.0), None], vec![Some(1.0), Some(1.0), Some(1.0)]]);
        assert_eq!(svg.matches("fill-opacity").count(), 2);
        assert_eq!(svg.matches(">class ").count(), 3);
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b>&"), "a&lt;b&gt;&amp;");
    }
}
