//! File formats: CSV and JSON emission, the SVG sweep chart, and readers for
//! state and weight files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::criterion::SweepRow;
use crate::dynamics::{cluster_count, ParticleState, Trajectory};
use crate::experiments::Cell;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// Shortest-exact form with 17 significant digits, so every double round-trips.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub fn cell_text(cell: &Cell) -> String {
    match cell {
        Cell::Int(v) => v.to_string(),
        Cell::Num(v) => format_float(*v),
        Cell::Bool(b) => b.to_string(),
        Cell::Text(s) => s.clone(),
    }
}

/// Header row followed by one record per row.
pub fn write_csv<W: Write>(w: W, columns: &[String], rows: &[Vec<Cell>]) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(columns)?;
    for row in rows {
        out.write_record(row.iter().map(cell_text))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<W: Write, T: Serialize + ?Sized>(mut w: W, value: &T) -> Result<(), IoError> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

/// Standard output or a created file.
pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, IoError> {
    match path {
        None => Ok(Box::new(std::io::stdout().lock())),
        Some(p) => {
            let f = fs::File::create(p).map_err(|source| IoError::File { path: p.to_path_buf(), source })?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
    }
}

/// `<out>.meta.json` next to a CSV output.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub const SWEEP_COLUMNS: [&str; 7] = ["beta", "tau", "integral", "lhs", "rhs", "ratio", "verdict"];

/// Sweep rows as a table; failed rows carry NaN values and an `error:` verdict.
pub fn sweep_table(rows: &[SweepRow]) -> (Vec<String>, Vec<Vec<Cell>>) {
    let cols = SWEEP_COLUMNS.iter().map(|c| c.to_string()).collect();
    let body = rows
        .iter()
        .map(|r| match &r.report {
            Ok(rep) => vec![
                r.beta.into(),
                rep.tau.into(),
                rep.integral_i.into(),
                rep.lhs.into(),
                rep.rhs.into(),
                rep.ratio.into(),
                rep.verdict.as_str().into(),
            ],
            Err(e) => {
                let mut v: Vec<Cell> = vec![r.beta.into()];
                v.extend(std::iter::repeat_n(Cell::Num(f64::NAN), 5));
                v.push(Cell::Text(format!("error: {e}")));
                v
            }
        })
        .collect();
    (cols, body)
}

/// Columns `t, diameter, energy, cluster_count`, then `x_0..x_{n−1}` when
/// `dump_angles` is set.
pub fn trajectory_table(traj: &Trajectory, gap_threshold: f64, dump_angles: bool) -> (Vec<String>, Vec<Vec<Cell>>) {
    let mut cols: Vec<String> = ["t", "diameter", "energy", "cluster_count"].iter().map(|c| c.to_string()).collect();
    let n = traj.states.first().map_or(0, ParticleState::n);
    if dump_angles {
        cols.extend((0..n).map(|i| format!("x_{i}")));
    }
    let rows = (0..traj.len())
        .map(|k| {
            let st = &traj.states[k];
            let mut row: Vec<Cell> = vec![
                traj.times[k].into(),
                traj.diameters[k].into(),
                traj.energies[k].into(),
                cluster_count(st, gap_threshold).into(),
            ];
            if dump_angles {
                row.extend(st.angles().iter().map(|&a| Cell::Num(a)));
            }
            row
        })
        .collect();
    (cols, rows)
}

fn parse_line_error(path: &str, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_string(), line, msg: msg.into() }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

/// Parses a state from text: one angle per line, a table with an `angle`
/// column, or a trajectory table with `x_i` columns (last row wins).
pub fn parse_state(text: &str, origin: &str) -> Result<ParticleState, IoError> {
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#')).collect();
    let Some(&(first_no, first)) = lines.first() else {
        return Err(parse_line_error(origin, 0, "no angles found"));
    };

    let angles: Vec<f64> = if first.parse::<f64>().is_ok() {
        lines
            .iter()
            .map(|&(no, l)| l.parse::<f64>().map_err(|e| parse_line_error(origin, no, format!("{l:?}: {e}"))))
            .collect::<Result<_, _>>()?
    } else {
        let header: Vec<&str> = first.split(',').map(str::trim).collect();
        let x_cols: Vec<(usize, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(k, h)| h.strip_prefix("x_").and_then(|i| i.parse::<usize>().ok()).map(|i| (i, k)))
            .collect();
        let field = |no: usize, l: &str, k: usize| -> Result<f64, IoError> {
            let v = l.split(',').nth(k).ok_or_else(|| parse_line_error(origin, no, "row is shorter than the header"))?;
            v.trim().parse::<f64>().map_err(|e| parse_line_error(origin, no, format!("{v:?}: {e}")))
        };
        if !x_cols.is_empty() {
            let mut x_cols = x_cols;
            x_cols.sort();
            if x_cols.iter().enumerate().any(|(expect, (i, _))| *i != expect) {
                return Err(parse_line_error(origin, first_no, "x_ columns must be x_0..x_{n-1}"));
            }
            let &(no, last) = lines.last().expect("non-empty");
            if no == first_no {
                return Err(parse_line_error(origin, no, "trajectory table has no rows"));
            }
            x_cols.iter().map(|&(_, k)| field(no, last, k)).collect::<Result<_, _>>()?
        } else if let Some(k) = header.iter().position(|h| *h == "angle") {
            lines[1..].iter().map(|&(no, l)| field(no, l, k)).collect::<Result<_, _>>()?
        } else {
            return Err(parse_line_error(origin, first_no, "expected numbers, an `angle` column or `x_i` columns"));
        }
    };
    ParticleState::new(angles).map_err(|e| parse_line_error(origin, first_no, e.to_string()))
}

pub fn read_state_file(path: &Path) -> Result<ParticleState, IoError> {
    parse_state(&read_text(path)?, &path.display().to_string())
}

/// One positive decimal per line.
pub fn read_weights_file(path: &Path) -> Result<Vec<f64>, IoError> {
    let origin = path.display().to_string();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let v: f64 = l.parse().map_err(|e| parse_line_error(&origin, i + 1, format!("{l:?}: {e}")))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(parse_line_error(&origin, i + 1, format!("weight must be positive, got {v}")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(parse_line_error(&origin, 0, "no weights found"));
    }
    Ok(out)
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect()
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// 800×600 chart of the synchronization ratio against `β`, with a dashed
/// reference line at ratio 1.
pub fn render_sweep_svg(rows: &[SweepRow], title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 600.0;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 30.0;
    const TOP: f64 = 50.0;
    const BOTTOM: f64 = 70.0;

    let points: Vec<(f64, f64)> =
        rows.iter().filter_map(|r| r.report.as_ref().ok().map(|rep| (r.beta, rep.ratio))).filter(|p| p.1.is_finite()).collect();
    let (mut x_lo, mut x_hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if !x_lo.is_finite() {
        x_lo = 0.0;
        x_hi = 1.0;
    }
    if x_hi <= x_lo {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    let y_max = points.iter().map(|p| p.1).fold(1.0, f64::max) * 1.05;
    let y_min = points.iter().map(|p| p.1).fold(0.0, f64::min);
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - y_min) / (y_max - y_min) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="600" viewBox="0 0 800 600">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="800" height="600" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="400" y="28" text-anchor="middle" font-family="sans-serif" font-size="18">{}</text>"#,
        escape_xml(title)
    );

    // Axes.
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for t in nice_ticks(x_lo, x_hi, 6) {
        let x = sx(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 6.0);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{t:.3}</text>"#,
            y0 + 22.0
        );
    }
    for t in nice_ticks(y_min, y_max, 6) {
        let y = sy(t);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 6.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="12">{t:.3}</text>"#,
            x0 - 10.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="14">beta</text>"#,
        (x0 + x1) / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="14" transform="rotate(-90 20 {:.2})">ratio</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let y_ref = sy(1.0);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y_ref:.2}" x2="{x1}" y2="{y_ref:.2}" stroke="gray" stroke-dasharray="6,4"/>"#);
    if !points.is_empty() {
        let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    }
    let _ = writeln!(s, "</svg>");
    s
}
