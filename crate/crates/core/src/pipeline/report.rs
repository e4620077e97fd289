//! CSV tables, map grids and SVG charts written from metric reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::cgf;
use crate::error::Result;
use crate::grid::GridField;
use crate::metrics::MetricReport;

use super::store::write_text;

/// Shortest round-trip decimal, empty for a missing value.
pub(crate) fn num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn table(header: &str, levels: &[f64], rows: &[(String, String, Vec<Option<f64>>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec![header.to_string(), "method".to_string()];
    head.extend(levels.iter().map(|l| l.to_string()));
    w.write_record(&head)?;
    for (metric, method, values) in rows {
        let mut rec = vec![metric.clone(), method.clone()];
        rec.extend(values.iter().map(|&v| num(v)));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Interval score and width per coverage level, one row per method and metric.
pub fn is_table(reports: &[MetricReport]) -> Result<String> {
    let levels = coverage_levels(reports);
    let mut rows = Vec::new();
    for (name, pick) in [
        ("IS", (|c: &crate::metrics::CoverageMetrics| c.mean_is) as fn(&_) -> _),
        ("IW", |c| c.mean_iw),
    ] {
        for r in reports {
            let values = levels.iter().map(|&l| r.coverage_level(l).and_then(pick)).collect();
            rows.push((name.to_string(), r.method.as_str().to_string(), values));
        }
    }
    table("metric", &levels, &rows)
}

/// PICP, its percentage deviation from nominal and per-tail miss rates.
pub fn picp_table(reports: &[MetricReport]) -> Result<String> {
    let levels = coverage_levels(reports);
    let mut rows = Vec::new();
    for (name, pick) in [
        ("PICP", (|c: &crate::metrics::CoverageMetrics| Some(c.mean_picp)) as fn(&_) -> _),
        ("pct_deviation", |c| Some(c.pct_deviation)),
        ("below", |c| Some(c.mean_below)),
        ("above", |c| Some(c.mean_above)),
    ] {
        for r in reports {
            let values = levels.iter().map(|&l| r.coverage_level(l).and_then(pick)).collect();
            rows.push((name.to_string(), r.method.as_str().to_string(), values));
        }
    }
    table("metric", &levels, &rows)
}

/// Quantile score per quantile level.
pub fn qs_table(reports: &[MetricReport]) -> Result<String> {
    let mut levels: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.quantile.iter().map(|q| q.level))
        .collect();
    sort_levels(&mut levels);
    let rows: Vec<_> = reports
        .iter()
        .map(|r| {
            let values = levels
                .iter()
                .map(|&l| r.quantile_level(l).and_then(|q| q.mean_qs))
                .collect();
            ("QS".to_string(), r.method.as_str().to_string(), values)
        })
        .collect();
    table("metric", &levels, &rows)
}

fn coverage_levels(reports: &[MetricReport]) -> Vec<f64> {
    let mut levels: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.coverage.iter().map(|c| c.level))
        .collect();
    sort_levels(&mut levels);
    levels
}

fn sort_levels(levels: &mut Vec<f64>) {
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() <= crate::grid::LEVEL_TOL);
}

/// Per-point PICP and mean width maps, one CGF1 grid per coverage level.
pub fn write_maps(dir: &Path, report: &MetricReport, template: &GridField) -> Result<()> {
    for c in &report.coverage {
        for (name, values) in [("picp", &c.picp_grid), ("iw", &c.iw_grid)] {
            let g = GridField::new(report.height, report.width, values.clone())?
                .with_optional_mask(template.shared_mask())?;
            let path = dir.join(format!("{name}_{}.cgf", c.level));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
            }
            cgf::save(&path, &g)?;
        }
    }
    Ok(())
}

/// Writes `picp.svg` and `pct_deviation.svg` with one series per report.
pub fn write_charts(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    let series = |f: fn(&crate::metrics::CoverageMetrics) -> f64| -> Vec<Series> {
        reports
            .iter()
            .map(|r| Series {
                name: r.method.as_str().to_string(),
                points: r.coverage.iter().map(|c| (c.level, f(c))).collect(),
            })
            .collect()
    };
    let picp = line_chart("Average PICP", "nominal level 1-α", "PICP", &series(|c| c.mean_picp), Reference::Diagonal);
    write_text(&dir.join("picp.svg"), &picp)?;
    let dev = line_chart(
        "Percentage deviation from nominal",
        "nominal level 1-α",
        "% deviation",
        &series(|c| c.pct_deviation),
        Reference::Horizontal(0.0),
    );
    write_text(&dir.join("pct_deviation.svg"), &dev)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Dashed nominal line drawn under the series.
#[derive(Debug, Clone, Copy)]
pub enum Reference {
    /// `y = x`
    Diagonal,
    Horizontal(f64),
}

const WIDTH: f64 = 520.0;
const HEIGHT: f64 = 340.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 120.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Static SVG line chart with axes, ticks, a legend and a nominal reference line.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], reference: Reference) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|y| y.is_finite());
    let (mut x0, mut x1) = bounds(xs);
    let (mut y0, mut y1) = bounds(ys);
    match reference {
        Reference::Diagonal => {
            x0 = x0.min(0.0);
            x1 = x1.max(1.0);
            y0 = y0.min(x0);
            y1 = y1.max(x1);
        }
        Reference::Horizontal(h) => {
            y0 = y0.min(h);
            y1 = y1.max(h);
        }
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{:.1} {:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
        LEFT,
        TOP,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=5 {
        let x = x0 + (x1 - x0) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{4}</text>"#,
            sx(x),
            TOP + ph,
            TOP + ph + 4.0,
            TOP + ph + 16.0,
            tick(x)
        );
        let y = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="black"/><text x="{3:.1}" y="{4:.1}" text-anchor="end">{5}</text>"#,
            LEFT - 4.0,
            sy(y),
            LEFT,
            LEFT - 6.0,
            sy(y) + 4.0,
            tick(y)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    let (ra, rb) = match reference {
        Reference::Diagonal => ((x0, x0), (x1, x1)),
        Reference::Horizontal(h) => ((x0, h), (x1, h)),
    };
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 3"/>"#,
        sx(ra.0),
        sy(ra.1),
        sx(rb.0),
        sy(rb.1)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
        }
        let ly = TOP + 14.0 * i as f64 + 6.0;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn tick(v: f64) -> String {
    let r = (v * 1000.0).round() / 1000.0;
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
