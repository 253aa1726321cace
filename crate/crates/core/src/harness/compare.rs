//! Cross-run comparison: per-epoch medians and an SVG line chart.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{HarnessError, RunSummary, METRICS_HEADER};
use crate::Result;

/// One parsed row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub preset: String,
    pub seed: u64,
    pub selected_env: u64,
    pub train_return: f64,
    pub eval_return: f64,
    pub norm_return: f64,
    pub eval_success: f64,
    pub lambda_var: f64,
    pub chosen_k: usize,
    pub dataset_size: usize,
    pub wall_ms: u64,
}

/// Per-epoch medians of one preset over its runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub preset: String,
    pub runs: usize,
    pub epochs: Vec<usize>,
    pub norm_return: Vec<f64>,
    pub eval_success: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutMedian {
    pub preset: String,
    pub runs: usize,
    pub norm_return: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub series: Vec<Series>,
    /// Present when every run directory has a held-out summary.
    pub heldout: Option<Vec<HeldoutMedian>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let bad = |msg: String| HarnessError::BadMetrics { path: path.to_path_buf(), msg };
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad("missing or unexpected header".into()).into());
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(bad(format!("row {}: expected 12 fields, got {}", i + 1, f.len())).into());
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
        let int = |j: usize| f[j].parse::<u64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
        let row = MetricsRow {
            epoch: int(0)? as usize,
            preset: f[1].to_string(),
            seed: int(2)?,
            selected_env: int(3)?,
            train_return: num(4)?,
            eval_return: num(5)?,
            norm_return: num(6)?,
            eval_success: num(7)?,
            lambda_var: num(8)?,
            chosen_k: int(9)? as usize,
            dataset_size: int(10)? as usize,
            wall_ms: int(11)?,
        };
        if rows.last().is_some_and(|p| p.epoch >= row.epoch) {
            return Err(bad(format!("row {}: epochs not strictly increasing", i + 1)).into());
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Group runs by preset, align them on the epochs common to every run, and
/// write `comparison.csv`, `comparison.svg` and, when all runs carry a
/// held-out summary, `heldout.csv` into `out`.
pub fn compare_runs(run_dirs: &[PathBuf], out: &Path) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(HarnessError::NoRuns.into());
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let rows = read_metrics(&dir.join("metrics.csv"))?;
        let summary = fs::read_to_string(dir.join("summary.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<RunSummary>(&t).ok());
        let preset = match (rows.first(), &summary) {
            (Some(r), _) => r.preset.clone(),
            (None, Some(s)) => s.preset.clone(),
            (None, None) => String::new(),
        };
        runs.push((preset, rows, summary));
    }
    let mut common: BTreeSet<usize> = runs[0].1.iter().map(|r| r.epoch).collect();
    for (_, rows, _) in &runs[1..] {
        let e: BTreeSet<usize> = rows.iter().map(|r| r.epoch).collect();
        common = common.intersection(&e).copied().collect();
    }
    if common.is_empty() {
        return Err(HarnessError::EmptyIntersection.into());
    }

    let mut by_preset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (p, _, _)) in runs.iter().enumerate() {
        by_preset.entry(p.as_str()).or_default().push(i);
    }
    let epochs: Vec<usize> = common.iter().copied().collect();
    let series: Vec<Series> = by_preset
        .iter()
        .map(|(preset, idx)| {
            let column = |e: usize, f: fn(&MetricsRow) -> f64| {
                let vals: Vec<f64> = idx
                    .iter()
                    .filter_map(|&i| runs[i].1.iter().find(|r| r.epoch == e).map(f))
                    .collect();
                median(&vals)
            };
            Series {
                preset: preset.to_string(),
                runs: idx.len(),
                epochs: epochs.clone(),
                norm_return: epochs.iter().map(|&e| column(e, |r| r.norm_return)).collect(),
                eval_success: epochs.iter().map(|&e| column(e, |r| r.eval_success)).collect(),
            }
        })
        .collect();

    let heldout: Option<Vec<HeldoutMedian>> = if runs.iter().all(|(_, _, s)| s.as_ref().is_some_and(|s| s.heldout.is_some())) {
        Some(
            by_preset
                .iter()
                .map(|(preset, idx)| {
                    let h: Vec<_> = idx.iter().filter_map(|&i| runs[i].2.as_ref()?.heldout).collect();
                    HeldoutMedian {
                        preset: preset.to_string(),
                        runs: idx.len(),
                        norm_return: median(&h.iter().map(|x| x.norm_return).collect::<Vec<_>>()),
                        success_rate: median(&h.iter().map(|x| x.success_rate).collect::<Vec<_>>()),
                    }
                })
                .collect(),
        )
    } else {
        None
    };

    fs::create_dir_all(out)?;
    let mut csv = String::from("epoch,preset,runs,median_norm_return,median_eval_success\n");
    for s in &series {
        for (j, e) in s.epochs.iter().enumerate() {
            writeln!(csv, "{e},{},{},{},{}", s.preset, s.runs, s.norm_return[j], s.eval_success[j]).unwrap();
        }
    }
    fs::write(out.join("comparison.csv"), csv)?;
    fs::write(out.join("comparison.svg"), render_svg(&series))?;
    if let Some(h) = &heldout {
        let mut csv = String::from("preset,runs,median_heldout_norm_return,median_heldout_success\n");
        for m in h {
            writeln!(csv, "{},{},{},{}", m.preset, m.runs, m.norm_return, m.success_rate).unwrap();
        }
        fs::write(out.join("heldout.csv"), csv)?;
    }
    Ok(Comparison { series, heldout })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of median normalized return against epoch, one polyline per
/// series.
pub fn render_svg(series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 30.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let xs = series.iter().flat_map(|s| s.epochs.iter().map(|&e| e as f64));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (x0.min(0.0), x0.max(0.0) + 1.0) };
    let ys = series.iter().flat_map(|s| s.norm_return.iter().copied()).filter(|v| v.is_finite());
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let (y0, y1) = if y0.is_finite() { ((y0.min(0.0) * 10.0).floor() / 10.0, (y1.max(0.0) * 10.0).ceil() / 10.0) } else { (-1.0, 1.0) };
    let (y0, y1) = if y1 > y0 { (y0, y1) } else { (y0 - 0.5, y1 + 0.5) };

    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    s.push_str("<title>Normalized return vs epoch</title>\n");
    s.push_str("<metadata>normalized return = eval return / running bound; the bound is the running maximum of |eval return| within each run (per run, not shared across runs); curves are per-epoch medians across seeds</metadata>\n");
    writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<g stroke="black" stroke-width="1"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#, top + ph, left + pw, top + ph, top + ph).unwrap();

    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        writeln!(s, r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"#, px(xv), top + ph, top + ph + 5.0, top + ph + 20.0, format_tick(xv)).unwrap();
        writeln!(s, r#"<line x1="{0}" y1="{2:.2}" x2="{1}" y2="{2:.2}" stroke="black"/><text x="{3}" y="{4:.2}" text-anchor="end">{5}</text>"#, left - 5.0, left, py(yv), left - 8.0, py(yv) + 4.0, format_tick(yv)).unwrap();
    }
    if y0 < 0.0 && y1 > 0.0 {
        writeln!(s, r##"<line x1="{left}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#bbbbbb" stroke-dasharray="4 3"/>"##, py(0.0), left + pw).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, left + pw / 2.0, h - 15.0).unwrap();
    writeln!(s, r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">normalized return</text>"#, top + ph / 2.0).unwrap();

    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .epochs
            .iter()
            .zip(&ser.norm_return)
            .filter(|(_, v)| v.is_finite())
            .map(|(&e, &v)| format!("{:.2},{:.2}", px(e as f64), py(v)))
            .collect();
        writeln!(s, r#"<polyline data-preset="{}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, esc(&ser.preset), pts.join(" ")).unwrap();
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 15.0;
        writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{} (n={})</text>"#, lx + 20.0, lx + 26.0, ly + 4.0, esc(&ser.preset), ser.runs).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == r.trunc() {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}
