use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::metrics::Metrics;
use crate::error::{Error, Result};

/// Column order of the metrics CSV.
pub const CSV_COLUMNS: [&str; 12] = [
    "policy",
    "task",
    "seed",
    "loss_mean",
    "loss_std",
    "in_deg_mean",
    "in_deg_std",
    "out_deg_mean",
    "out_deg_std",
    "total_deg_mean",
    "total_deg_std",
    "combined_J",
];

pub fn write_csv<W: Write>(metrics: &[Metrics], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_COLUMNS)?;
    for m in metrics {
        wr.write_record([
            m.policy.clone(),
            m.task.clone(),
            m.seed.to_string(),
            m.loss_mean.to_string(),
            m.loss_std.to_string(),
            m.in_deg_mean.to_string(),
            m.in_deg_std.to_string(),
            m.out_deg_mean.to_string(),
            m.out_deg_std.to_string(),
            m.total_deg_mean.to_string(),
            m.total_deg_std.to_string(),
            m.combined_j.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn to_json(metrics: &[Metrics]) -> String {
    serde_json::to_string_pretty(metrics).expect("metrics serialize")
}

pub fn from_json(text: &str) -> Result<Vec<Metrics>> {
    Ok(serde_json::from_str(text)?)
}

/// Averages per-seed metrics of the same policy into one bar with the spread across seeds.
pub fn pool_seeds(metrics: &[Metrics]) -> Vec<(String, f64, f64, f64, f64, bool)> {
    let mut names: Vec<String> = Vec::new();
    for m in metrics {
        if !names.contains(&m.policy) {
            names.push(m.policy.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<&Metrics> = metrics.iter().filter(|m| m.policy == name).collect();
            let full = rows.iter().any(|m| m.full_communication);
            if rows.len() == 1 {
                let m = rows[0];
                return (name, m.loss_mean, m.loss_std, m.total_deg_mean, m.total_deg_std, full);
            }
            let (l, ls) = super::metrics::mean_std(&rows.iter().map(|m| m.loss_mean).collect::<Vec<_>>());
            let (d, ds) = super::metrics::mean_std(&rows.iter().map(|m| m.total_deg_mean).collect::<Vec<_>>());
            (name, l, ls, d, ds, full)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two-panel bar chart (loss, max degree) with one-std error bars.
pub fn render_svg(metrics: &[Metrics]) -> Result<String> {
    let bars = pool_seeds(metrics);
    if bars.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let (pw, ph, pad) = (360.0, 240.0, 40.0);
    let width = 2.0 * pw + 3.0 * pad;
    let height = ph + 2.0 * pad + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    type Bar = (String, f64, f64, f64, f64, bool);
    let panels: [(&str, fn(&Bar) -> (f64, f64)); 2] = [("loss", |b| (b.1, b.2)), ("max degree", |b| (b.3, b.4))];
    for (p, (title, get)) in panels.iter().enumerate() {
        let x0 = pad + p as f64 * (pw + pad);
        let y0 = pad;
        let top = bars.iter().map(|b| get(b).0 + get(b).1).fold(0.0f64, f64::max).max(1e-9) * 1.1;
        let _ = writeln!(svg, r#"<g class="panel" data-title="{title}">"#);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{title}</text>"#, x0 + pw / 2.0, y0 - 12.0);
        let _ = writeln!(svg, r#"<line x1="{x0}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, y0 + ph, x0 + pw, y0 + ph);
        let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{}" stroke="black"/>"#, y0 + ph);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{top:.3}</text>"#, x0 - 4.0, y0 + 4.0);
        let slot = pw / bars.len() as f64;
        for (k, b) in bars.iter().enumerate() {
            let (v, e) = get(b);
            let cx = x0 + slot * (k as f64 + 0.5);
            let bw = slot * 0.6;
            let h = (v.max(0.0) / top) * ph;
            let _ = writeln!(
                svg,
                r##"<rect class="bar" x="{:.2}" y="{:.2}" width="{bw:.2}" height="{h:.2}" fill="#4c72b0"/>"##,
                cx - bw / 2.0,
                y0 + ph - h
            );
            if p == 1 && b.5 {
                let _ = writeln!(svg, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">full</text>"#, y0 + ph - 4.0);
            } else if e > 0.0 {
                let (ylo, yhi) = (y0 + ph - ((v - e).max(0.0) / top) * ph, y0 + ph - ((v + e) / top) * ph);
                let _ = writeln!(svg, r#"<line x1="{cx:.2}" y1="{ylo:.2}" x2="{cx:.2}" y2="{yhi:.2}" stroke="black"/>"#);
                for y in [ylo, yhi] {
                    let _ = writeln!(svg, r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#, cx - 4.0, cx + 4.0);
                }
            }
            let _ = writeln!(svg, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + ph + 16.0, escape(&b.0));
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes `metrics.json`, `metrics.csv` and `comparison.svg` into `dir`.
pub fn write_report(metrics: &[Metrics], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join("metrics.json");
    std::fs::write(&json, to_json(metrics))?;
    let csv_path = dir.join("metrics.csv");
    write_csv(metrics, std::fs::File::create(&csv_path)?)?;
    let svg = dir.join("comparison.svg");
    std::fs::write(&svg, render_svg(metrics)?)?;
    Ok(vec![json, csv_path, svg])
}
