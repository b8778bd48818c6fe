//! Minimal SVG line charts and heatmaps.

use std::fmt::Write;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with a fixed y range (success rates use `[0, 1]`).
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: (f64, f64)) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (y0, y1) = y_range;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y.clamp(y0, y1) - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py}" x2="{}" y2="{py}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{y:.2}</text>"##,
            left + pw,
            left - 5.0,
            py(y) + 4.0,
            py = py(y)
        );
        let x = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ =
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(x), top + ph + 18.0, fmt_tick(x));
    }
    let _ =
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        if pts.len() > 1 {
            let _ =
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            left + pw + 10.0,
            ly - 10.0,
            left + pw + 26.0,
            ly,
            esc(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.1}")
    }
}

/// Heatmap of values in `[0, 1]`; `None` cells are drawn hatched grey and labelled "n/a".
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<Option<f64>>]) -> String {
    let cell = 48.0;
    let (left, top) = (120.0, 60.0);
    let w = left + cell * col_labels.len() as f64 + 20.0;
    let h = top + cell * row_labels.len() as f64 + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    for (j, c) in col_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + cell * (j as f64 + 0.5),
            top - 8.0,
            esc(c)
        );
    }
    for (i, r) in row_labels.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ =
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, y + cell / 2.0 + 4.0, esc(r));
        for j in 0..col_labels.len() {
            let x = left + cell * j as f64;
            let v = values.get(i).and_then(|row| row.get(j)).copied().flatten();
            let (fill, text) = match v {
                Some(v) => {
                    let v = v.clamp(0.0, 1.0);
                    // white (0) to dark blue (1)
                    let r = (255.0 * (1.0 - v) + 8.0 * v) as u8;
                    let g = (255.0 * (1.0 - v) + 48.0 * v) as u8;
                    let b = (255.0 * (1.0 - v) + 107.0 * v) as u8;
                    (format!("rgb({r},{g},{b})"), format!("{v:.2}"))
                }
                None => ("#bbbbbb".to_string(), "n/a".to_string()),
            };
            let ink = if v.unwrap_or(0.0) > 0.55 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/><text x="{}" y="{}" text-anchor="middle" fill="{ink}">{text}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Bob (columns) vs Alice (rows)</text>"#,
        left + cell * col_labels.len() as f64 / 2.0,
        top + cell * row_labels.len() as f64 + 30.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_chart_is_well_formed() {
        let svg =
            line_chart("t", "step", "rate", &[Series { label: "a<b".into(), points: vec![(3.0, 0.5)] }], (0.0, 1.0));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn heatmap_marks_missing() {
        let svg = heatmap("p", &["a".into()], &["x".into(), "y".into()], &[vec![Some(0.25), None]]);
        assert!(svg.contains("0.25") && svg.contains("n/a"));
    }
}
