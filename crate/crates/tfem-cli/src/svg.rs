//! Minimal hand-rolled SVG output: polyline series with mean±std bands, and
//! class-colored scatter plots. Figures are inspection artifacts; no
//! charting dependency.

use std::io::Write;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 480.0;
const ML: f64 = 70.0; // left margin
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One plotted curve: `(x, mean, std)` triples; the band spans mean ± std.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64, f64)>,
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.3e}")
    }
}

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        Scale { lo, hi, px_lo, px_hi }
    }

    fn at(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, xs: &Scale, ys: &Scale, x_label: &str, y_label: &str) {
    let (x0, x1) = (ML, W - MR);
    let (y0, y1) = (H - MB, MT);
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{x0}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"{x1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        H - MB + 18.0,
        fmt(xs.lo),
        H - MB + 18.0,
        fmt(xs.hi)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
        ML - 6.0,
        y0 + 4.0,
        fmt(ys.lo),
        ML - 6.0,
        y1 + 4.0,
        fmt(ys.hi)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    ));
}

/// Write a line plot with one polyline + translucent ±std band per series.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> std::io::Result<()> {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, m, sd) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(m - sd);
            ymax = ymax.max(m + sd);
        }
    }
    if !xmin.is_finite() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = 0.05 * (ymax - ymin).max(1e-12);
    let xs = Scale::new(xmin, xmax, ML, W - MR);
    let ys = Scale::new(ymin - pad, ymax + pad, H - MB, MT);

    let mut out = header(title);
    axes(&mut out, &xs, &ys, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            // band polygon: upper edge left-to-right, lower edge back
            let mut pts = String::new();
            for &(x, m, sd) in &s.points {
                pts.push_str(&format!("{},{} ", xs.at(x), ys.at(m + sd)));
            }
            for &(x, m, sd) in s.points.iter().rev() {
                pts.push_str(&format!("{},{} ", xs.at(x), ys.at(m - sd)));
            }
            out.push_str(&format!(
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
                pts.trim_end()
            ));
            let line: Vec<String> =
                s.points.iter().map(|&(x, m, _)| format!("{},{}", xs.at(x), ys.at(m))).collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                line.join(" ")
            ));
        }
        for &(x, m, _) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                xs.at(x),
                ys.at(m)
            ));
        }
        // legend entry
        let ly = MT + 14.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            W - MR - 120.0,
            ly,
            W - MR - 106.0,
            ly + 9.0,
            escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    std::fs::File::create(path)?.write_all(out.as_bytes())
}

/// Write a scatter plot of 2-D points colored by class index.
pub fn scatter_plot(path: &Path, title: &str, points: &[(f64, f64, usize)]) -> std::io::Result<()> {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for &(x, y, _) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if !xmin.is_finite() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    let xs = Scale::new(xmin, xmax, ML, W - MR);
    let ys = Scale::new(ymin, ymax, H - MB, MT);
    let mut out = header(title);
    axes(&mut out, &xs, &ys, "coordinate 1", "coordinate 2");
    for &(x, y, c) in points {
        out.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
            xs.at(x),
            ys.at(y),
            PALETTE[c % PALETTE.len()]
        ));
    }
    out.push_str("</svg>\n");
    std::fs::File::create(path)?.write_all(out.as_bytes())
}
