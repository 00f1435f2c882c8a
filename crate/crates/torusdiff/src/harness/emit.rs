//! Sweep artifacts: `sweep.csv`, `summary.json`, `rate_plot.svg`.
//!
//! The CSV is the canonical, deterministic record: fixed header, 17
//! significant digits per float, `\n` newlines, rows sorted by
//! `(scheme, N, seed)`. The SVG is a log-log plot of the aggregated errors
//! against `N` with confidence whiskers and an `N^-1` reference line.

use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sim::fmt_f64;

use super::{AggregateRow, RateFit, RunConfig, SweepResult, SweepRow};

pub const SWEEP_CSV_HEADER: &str =
    "scheme,N,tau,T,seed,drift_loss,diffusion_loss,f_recovery_error,wall_time_s,status";

/// Paths written by [`emit_outputs`].
#[derive(Debug, Clone)]
pub struct EmittedPaths {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(128 * (rows.len() + 1));
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.n,
            fmt_f64(r.tau),
            fmt_f64(r.t_horizon),
            r.seed,
            fmt_f64(r.drift_loss),
            fmt_f64(r.diffusion_loss),
            fmt_f64(r.f_recovery_error),
            fmt_f64(r.wall_time_s),
            r.status
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

pub fn parse_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == SWEEP_CSV_HEADER => {}
        _ => {
            return Err(Error::CsvParse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header `{SWEEP_CSV_HEADER}`"),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::CsvParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::CsvParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("{what}: {e}"),
            })
        };
        let parse_u = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|e| Error::CsvParse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("{what}: {e}"),
            })
        };
        let wall = parse_f(fields[8], "wall_time_s")?;
        rows.push(SweepRow {
            scheme: fields[0].to_string(),
            n: parse_u(fields[1], "N")? as usize,
            tau: parse_f(fields[2], "tau")?,
            t_horizon: parse_f(fields[3], "T")?,
            seed: parse_u(fields[4], "seed")?,
            drift_loss: parse_f(fields[5], "drift_loss")?,
            diffusion_loss: parse_f(fields[6], "diffusion_loss")?,
            f_recovery_error: parse_f(fields[7], "f_recovery_error")?,
            wall_time_s: wall,
            status: fields[9].to_string(),
            measured_wall_s: wall,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    config_hash: String,
    aggregates: &'a [AggregateRow],
    fit_segment_len: usize,
    rate_fit: Option<RateFit>,
    /// Measured seconds per row, aligned with the CSV row order; informative
    /// only and deliberately outside the deterministic artifact.
    measured_wall_s: Vec<f64>,
}

pub fn write_summary_json(result: &SweepResult, cfg: &RunConfig, path: &Path) -> Result<()> {
    let doc = SummaryDoc {
        config_hash: cfg.hash(),
        aggregates: &result.aggregates,
        fit_segment_len: result.fit_segment_len,
        rate_fit: result.rate_fit,
        measured_wall_s: result.rows.iter().map(|r| r.measured_wall_s).collect(),
    };
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).map_err(Error::io(path))
}

struct LogPlane {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

impl LogPlane {
    fn x(&self, n: f64) -> f64 {
        let t = (n.ln() - self.x0) / (self.x1 - self.x0);
        self.left + t * (self.right - self.left)
    }

    fn y(&self, e: f64) -> f64 {
        let t = (e.ln() - self.y0) / (self.y1 - self.y0);
        // larger errors sit higher on the canvas
        self.bottom - t * (self.bottom - self.top)
    }
}

/// Renders the aggregated sweep as a log-log SVG: one polyline per metric
/// with CI whiskers, plus an `N^-1` reference line anchored at the first
/// diffusion point.
pub fn write_rate_plot_svg(result: &SweepResult, path: &Path) -> Result<()> {
    const W: f64 = 720.0;
    const H: f64 = 540.0;
    let metrics: [(&str, fn(&AggregateRow) -> (f64, f64)); 3] = [
        ("drift_loss", |a| (a.mean_drift_loss, a.ci_drift_loss)),
        ("diffusion_loss", |a| {
            (a.mean_diffusion_loss, a.ci_diffusion_loss)
        }),
        ("f_recovery_error", |a| {
            (a.mean_f_recovery_error, a.ci_f_recovery_error)
        }),
    ];
    let colors = ["#1f77b4", "#d62728", "#2ca02c"];

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for a in &result.aggregates {
        for (_, get) in &metrics {
            let (m, ci) = get(a);
            if m.is_finite() && m > 0.0 {
                xs.push(a.n as f64);
                ys.push(m);
                let lo = m - ci;
                if lo > 0.0 {
                    ys.push(lo);
                }
                ys.push(m + ci);
            }
        }
    }
    if xs.is_empty() {
        // nothing plottable; still produce a well-formed document
        let svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\">\
             <text x=\"20\" y=\"40\">no finite data</text></svg>\n"
        );
        return std::fs::write(path, svg).map_err(Error::io(path));
    }
    let fmin = |v: &Vec<f64>| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let fmax = |v: &Vec<f64>| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let plane = LogPlane {
        x0: fmin(&xs).ln() - 0.15,
        x1: fmax(&xs).ln() + 0.15,
        y0: fmin(&ys).ln() - 0.3,
        y1: fmax(&ys).ln() + 0.3,
        left: 70.0,
        right: W - 30.0,
        top: 30.0,
        bottom: H - 50.0,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        plane.left,
        plane.top,
        plane.right - plane.left,
        plane.bottom - plane.top
    );
    // x tick per grid point, y labels at data extremes
    for a in &result.aggregates {
        let x = plane.x(a.n as f64);
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{0:.1}\" x2=\"{x:.1}\" y2=\"{1:.1}\" stroke=\"#bbb\"/>",
            plane.bottom,
            plane.bottom + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">N={}</text>",
            plane.bottom + 20.0,
            a.n
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\">error {:.3e}</text>",
        5.0,
        plane.top + 10.0,
        fmax(&ys)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\">error {:.3e}</text>",
        5.0,
        plane.bottom,
        fmin(&ys)
    );

    // N^-1 reference through the first finite diffusion point
    if let Some(anchor) = result
        .aggregates
        .iter()
        .find(|a| a.mean_diffusion_loss.is_finite() && a.mean_diffusion_loss > 0.0)
    {
        let c = anchor.mean_diffusion_loss * anchor.n as f64;
        let n_lo = fmin(&xs);
        let n_hi = fmax(&xs);
        let _ = writeln!(
            svg,
            "<line class=\"reference\" x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#e33\" stroke-dasharray=\"6,4\"/>",
            plane.x(n_lo),
            plane.y(c / n_lo),
            plane.x(n_hi),
            plane.y(c / n_hi)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#e33\">N^-1 reference</text>",
            plane.x(n_hi) - 110.0,
            plane.y(c / n_hi) - 6.0
        );
    }

    for ((name, get), color) in metrics.iter().zip(colors) {
        let pts: Vec<(f64, f64, f64)> = result
            .aggregates
            .iter()
            .filter_map(|a| {
                let (m, ci) = get(a);
                (m.is_finite() && m > 0.0).then_some((a.n as f64, m, ci))
            })
            .collect();
        if pts.is_empty() {
            continue;
        }
        for &(n, m, ci) in &pts {
            if ci > 0.0 && m - ci > 0.0 {
                let x = plane.x(n);
                let _ = writeln!(
                    svg,
                    "<line class=\"whisker\" x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>",
                    plane.y(m - ci),
                    plane.y(m + ci)
                );
            }
        }
        let path_pts: Vec<String> = pts
            .iter()
            .map(|&(n, m, _)| format!("{:.1},{:.1}", plane.x(n), plane.y(m)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline class=\"metric-{name}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path_pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{name}</text>",
            plane.right - 150.0,
            plane.top + 16.0 * (1.0 + metrics.iter().position(|m| m.0 == *name).unwrap() as f64)
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(Error::io(path))
}

/// Writes all three artifacts into `dir`, creating it if needed.
pub fn emit_outputs(result: &SweepResult, cfg: &RunConfig, dir: &Path) -> Result<EmittedPaths> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let paths = EmittedPaths {
        csv: dir.join("sweep.csv"),
        summary: dir.join("summary.json"),
        plot: dir.join("rate_plot.svg"),
    };
    write_sweep_csv(&result.rows, &paths.csv)?;
    write_summary_json(result, cfg, &paths.summary)?;
    write_rate_plot_svg(result, &paths.plot)?;
    Ok(paths)
}
