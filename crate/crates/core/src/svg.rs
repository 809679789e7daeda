//! Dependency-free SVG line charts for accuracy curves.

use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One labeled line.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Renders labeled series as a standalone SVG line chart with axes and a
/// legend, one polyline per series.
pub fn render_svg(series: &[Series], x_label: &str, y_label: &str) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Value("svg chart needs at least one nonempty series".into()));
    }
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut x_min, mut x_max) = bounds(xs);
    let (mut y_min, mut y_max) = bounds(ys);
    if x_max == x_min {
        x_max = x_min + 1.0;
        x_min -= 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 0.5;
        y_min -= 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_min) / (y_max - y_min) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    // axes
    out.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    out.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    ));
    // axis ticks and labels
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            sx(fx),
            HEIGHT - MARGIN + 14.0,
            trim_num(fx)
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            sy(fy) + 3.0,
            trim_num(fy)
        ));
    }
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        WIDTH / 2.0,
        HEIGHT - 8.0
    ));
    out.push_str(&format!(
        "  <text x=\"14\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{y_label}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));

    for (i, s) in series.iter().filter(|s| !s.points.is_empty()).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        out.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        // single points still get a visible marker
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            out.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = MARGIN + 14.0 * i as f64;
        out.push_str(&format!(
            "  <line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN - 60.0 + 18.0,
            lx = WIDTH - MARGIN - 60.0,
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>\n",
            WIDTH - MARGIN - 60.0 + 22.0,
            ly + 3.0,
            s.label
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders and writes the chart to `path`.
pub fn emit_svg(series: &[Series], x_label: &str, y_label: &str, path: &Path) -> Result<()> {
    let text = render_svg(series, x_label, y_label)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn trim_num(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 && v.abs() < 1e7 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.3}")
    }
}
