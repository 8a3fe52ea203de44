//! Deterministic SVG charts and a text summary from result CSVs.
//!
//! Every plotted number is also stored verbatim in a `data-value` (or
//! `data-values`) attribute, so charts can be checked against their CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::sweep::RESULTS_HEADER;
use crate::error::{Error, Result};
use crate::trainer::{write_text, METRICS_HEADER};

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

const PALETTE: [&str; 6] = ["#1f6f8b", "#d1495b", "#edae49", "#66a182", "#6c4f8c", "#333333"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut offset = text.find('\n').map_or(text.len(), |i| i + 1);
    for line in lines {
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(Error::parse(offset, format!("expected {} columns, got {}", header.len(), cells.len())));
        }
        rows.push(cells);
        offset += line.len() + 1;
    }
    Ok(Table { header, rows })
}

fn number(cell: &str) -> Result<f64> {
    cell.parse().map_err(|_| Error::Invalid(format!("not a number: {cell:?}")))
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

/// Axes with `ticks + 1` labelled gridlines from `lo` to `hi`.
fn axes(out: &mut String, lo: f64, hi: f64, ticks: usize, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    for i in 0..=ticks {
        let v = lo + (hi - lo) * i as f64 / ticks as f64;
        let y = y0 + (y1 - y0) * i as f64 / ticks as f64;
        let _ = writeln!(out, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#e4e4e4"/>"##);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, trim(v));
    }
    let _ = writeln!(out, r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000000"/>"##);
    let _ = writeln!(out, r##"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000000"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn trim(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn y_of(v: f64, lo: f64, hi: f64) -> f64 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (H - BOTTOM) + (TOP - (H - BOTTOM)) * t
}

/// Bars of mean accuracy with one-std whiskers, one bar per setting.
fn bar_chart(sweep: &str, rows: &[&Vec<String>]) -> Result<String> {
    let mut out = String::new();
    svg_open(&mut out, &format!("Target accuracy by {sweep}"));
    axes(&mut out, 0.0, 100.0, 5, "target accuracy (%)");
    let slot = (W - LEFT - RIGHT) / rows.len() as f64;
    let bar = slot * 0.6;
    for (i, r) in rows.iter().enumerate() {
        let (setting, mean, std, runs) = (&r[1], &r[4], &r[5], &r[3]);
        let (m, s) = (number(mean)?, number(std)?);
        let x = LEFT + slot * i as f64 + (slot - bar) / 2.0;
        let y = y_of(m, 0.0, 100.0);
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{bar:.2}" height="{:.2}" fill="{}" data-sweep="{}" data-setting="{}" data-value="{}" data-std="{}" data-runs="{}"/>"#,
            (H - BOTTOM) - y,
            PALETTE[i % PALETTE.len()],
            escape(sweep),
            escape(setting),
            escape(mean),
            escape(std),
            escape(runs)
        );
        let cx = x + bar / 2.0;
        let (hi, lo) = (y_of((m + s).min(100.0), 0.0, 100.0), y_of((m - s).max(0.0), 0.0, 100.0));
        let _ = writeln!(out, r##"<line class="whisker" x1="{cx:.2}" y1="{hi:.2}" x2="{cx:.2}" y2="{lo:.2}" stroke="#000000"/>"##);
        let _ = writeln!(out, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, hi - 4.0, trim(m));
        let _ = writeln!(out, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, H - BOTTOM + 16.0, escape(setting));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Polylines over steps, one per named column.
fn line_chart(title: &str, y_label: &str, steps: &[String], series: &[(&str, Vec<String>)]) -> Result<String> {
    let values: Vec<Vec<f64>> = series.iter().map(|(_, v)| v.iter().map(|c| number(c)).collect()).collect::<Result<_>>()?;
    let step_v: Vec<f64> = steps.iter().map(|c| number(c)).collect::<Result<_>>()?;
    let hi = values.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let (s0, s1) = (step_v.first().copied().unwrap_or(0.0), step_v.last().copied().unwrap_or(1.0));
    let x_of = |s: f64| if s1 > s0 { LEFT + (W - LEFT - RIGHT) * (s - s0) / (s1 - s0) } else { LEFT };
    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, 0.0, hi, 4, y_label);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#, (LEFT + W - RIGHT) / 2.0, H - 12.0);
    for (i, ((name, raw), vals)) in series.iter().zip(&values).enumerate() {
        let pts: Vec<String> =
            step_v.iter().zip(vals).map(|(&s, &v)| format!("{:.2},{:.2}", x_of(s), y_of(v, 0.0, hi))).collect();
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<polyline class="series" fill="none" stroke="{color}" points="{}" data-series="{}" data-steps="{}" data-values="{}"/>"#,
            pts.join(" "),
            escape(name),
            steps.join(" "),
            raw.join(" ")
        );
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(out, r#"<text x="{:.2}" y="{ly:.2}" fill="{color}">{}</text>"#, W - RIGHT - 80.0, escape(name));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

/// Writes charts for every input into `out` plus `summary.txt`. Returns the
/// written chart paths in order.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut summary = String::new();
    for input in inputs {
        let table = read_table(input)?;
        let name = stem(input);
        let header = table.header.join(",");
        if header == RESULTS_HEADER {
            let mut sweeps: Vec<&str> = Vec::new();
            for r in &table.rows {
                if !sweeps.contains(&r[0].as_str()) {
                    sweeps.push(&r[0]);
                }
            }
            for sweep in sweeps {
                let rows: Vec<&Vec<String>> = table.rows.iter().filter(|r| r[0] == sweep).collect();
                let path = out.join(format!("{name}_{sweep}.svg"));
                write_text(&path, &bar_chart(sweep, &rows)?)?;
                written.push(path);
                let best = rows
                    .iter()
                    .map(|r| Ok((number(&r[4])?, *r)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(None::<(f64, &Vec<String>)>, |acc, x| match acc {
                        Some(a) if a.0 >= x.0 => Some(a),
                        _ => Some(x),
                    })
                    .expect("sweep has rows");
                let _ = writeln!(summary, "{name} [{sweep}]");
                for r in &rows {
                    let _ = writeln!(summary, "  {:<12} {:>8} +- {:<8} ({} runs)", r[1], trim(number(&r[4])?), trim(number(&r[5])?), r[3]);
                }
                let _ = writeln!(summary, "  best: {}", best.1[1]);
            }
        } else if header == METRICS_HEADER {
            if table.rows.is_empty() {
                return Err(Error::Invalid(format!("{}: no metric rows", input.display())));
            }
            let col = |i: usize| table.rows.iter().map(|r| r[i].clone()).collect::<Vec<_>>();
            let steps = col(0);
            let series: Vec<(&str, Vec<String>)> = [(1, "ce"), (2, "smn"), (3, "em"), (4, "kl"), (6, "total")]
                .iter()
                .map(|&(i, n)| (n, col(i)))
                .collect();
            let path = out.join(format!("{name}_losses.svg"));
            write_text(&path, &line_chart("Training losses", "loss", &steps, &series)?)?;
            written.push(path);
            let evals: Vec<&Vec<String>> = table.rows.iter().filter(|r| !r[8].is_empty()).collect();
            let last = table.rows.last().expect("nonempty");
            let _ = writeln!(summary, "{name} [metrics]");
            let _ = writeln!(summary, "  steps: {}", table.rows.len());
            let _ = writeln!(summary, "  final total loss: {}", trim(number(&last[6])?));
            if !evals.is_empty() {
                let s: Vec<String> = evals.iter().map(|r| r[0].clone()).collect();
                let v: Vec<String> = evals.iter().map(|r| r[8].clone()).collect();
                let path = out.join(format!("{name}_target_acc.svg"));
                write_text(&path, &line_chart("Target accuracy", "accuracy (%)", &s, &[("target_acc", v.clone())])?)?;
                written.push(path);
                let _ = writeln!(summary, "  final target accuracy: {}", trim(number(v.last().expect("nonempty"))?));
            }
        } else {
            return Err(Error::parse(0, format!("{}: unrecognised CSV header {header:?}", input.display())));
        }
    }
    write_text(&out.join("summary.txt"), &summary)?;
    Ok(written)
}
