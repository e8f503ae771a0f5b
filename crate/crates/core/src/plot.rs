//! Minimal SVG line charts for run artifacts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Series { label: label.into(), x, y }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(v: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if lo > hi {
        return None;
    }
    if hi - lo < 1e-300 {
        let pad = lo.abs().max(1.0) * 0.5;
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

/// Polyline chart of the series; with `log_y`, nonpositive values are dropped.
pub fn line_chart(title: &str, x_label: &str, series: &[Series], log_y: bool) -> Result<String> {
    if series.iter().any(|s| s.x.len() != s.y.len()) {
        return invalid("series x and y lengths differ");
    }
    let ty = |y: f64| if log_y { if y > 0.0 { y.log10() } else { f64::NAN } } else { y };
    let xs = span(series.iter().flat_map(|s| s.x.iter().copied()));
    let ys = span(series.iter().flat_map(|s| s.y.iter().map(|&y| ty(y))));
    let ((x0, x1), (y0, y1)) = match (xs, ys) {
        (Some(x), Some(y)) => (x, y),
        _ => return invalid("nothing to plot"),
    };
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(w, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        w,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylab = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3e}") };
        let _ = writeln!(w, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, px(xv), HEIGHT - MARGIN + 18.0);
        let _ = writeln!(w, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylab}</text>"#, MARGIN - 6.0, py(yv) + 4.0);
    }
    let _ = writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 16.0, escape(x_label));
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s
            .x
            .iter()
            .zip(&s.y)
            .filter(|(x, y)| x.is_finite() && ty(**y).is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(ty(y))))
            .collect();
        let _ = writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(w, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, WIDTH - MARGIN - 140.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Chart selected columns of a CSV file against its first column.
pub fn plot_csv(csv_path: &Path, columns: &[String], out: &Path, log_y: bool) -> Result<()> {
    let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| Error::Schema(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    let x_label = headers.get(0).unwrap_or("x").to_string();
    let picked: Vec<usize> = if columns.is_empty() {
        (1..headers.len()).collect()
    } else {
        columns
            .iter()
            .map(|c| headers.iter().position(|h| h == c).ok_or_else(|| Error::Schema(format!("no column named {c}"))))
            .collect::<Result<_>>()?
    };
    let mut series: Vec<Series> = picked.iter().map(|&i| Series::new(&headers[i], Vec::new(), Vec::new())).collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Schema(e.to_string()))?;
        let x: f64 = rec.get(0).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        for (s, &i) in series.iter_mut().zip(&picked) {
            s.x.push(x);
            s.y.push(rec.get(i).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN));
        }
    }
    let title = csv_path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    std::fs::write(out, line_chart(title, &x_label, &series, log_y)?)?;
    Ok(())
}
