//! Line charts from CSV logs, written as standalone SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 30.0, 30.0, 60.0); // left, right, top, bottom
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// `(x, y)` pairs of one CSV; rows with an empty or non-numeric cell in
/// either column are skipped.
pub fn read_series(path: &Path, x: &str, y: &str) -> Result<Series, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Plot(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| CliError::Plot(format!("{}: {e}", path.display())))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| CliError::Plot(format!("{}: no column named `{name}`", path.display())))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Plot(format!("{}: {e}", path.display())))?;
        let cell = |i: usize| rec.get(i).and_then(|s| s.trim().parse::<f64>().ok()).filter(|v| v.is_finite());
        if let (Some(a), Some(b)) = (cell(xi), cell(yi)) {
            points.push((a, b));
        }
    }
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let label = match path.parent().and_then(Path::file_name) {
        Some(dir) if label == "log" || label == "timed_log" => dir.to_string_lossy().into_owned(),
        _ => label,
    };
    Ok(Series { label, points })
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per series on shared linear axes.
pub fn render_svg(series: &[Series], x_label: &str, y_label: &str) -> Result<String, CliError> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(CliError::Plot("no data points to plot".into()));
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let w = &mut svg;
    let ok = "string write";
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).expect(ok);
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).expect(ok);
    writeln!(w, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).expect(ok);
    for t in nice_ticks(x0, x1) {
        let x = sx(t);
        writeln!(w, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/>"##, mt, mt + ph).expect(ok);
        writeln!(w, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, mt + ph + 16.0, fmt_tick(t)).expect(ok);
    }
    for t in nice_ticks(y0, y1) {
        let y = sy(t);
        writeln!(w, r##"<line x1="{ml}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, ml + pw).expect(ok);
        writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, ml - 6.0, y + 4.0, fmt_tick(t)).expect(ok);
    }
    writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, HEIGHT - 15.0, escape(x_label)).expect(ok);
    writeln!(
        w,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(y_label)
    )
    .expect(ok);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).expect(ok);
        let ly = mt + 14.0 + 16.0 * i as f64;
        let lx = ml + pw - 150.0;
        writeln!(
            w,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        )
        .expect(ok);
        writeln!(w, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 26.0, escape(&s.label)).expect(ok);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Reads every CSV, renders, and writes `out`. Nothing is written on error.
pub fn plot(paths: &[PathBuf], x: &str, y: &str, out: &Path) -> Result<usize, CliError> {
    if paths.is_empty() {
        return Err(CliError::Plot("no input files".into()));
    }
    let series = paths.iter().map(|p| read_series(p, x, y)).collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = series.iter().find(|s| s.points.is_empty()) {
        return Err(CliError::Plot(format!("`{}` has no rows with both `{x}` and `{y}`", s.label)));
    }
    let svg = render_svg(&series, x, y)?;
    crate::commands::write(out, &svg)?;
    Ok(series.len())
}
