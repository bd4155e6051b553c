//! Run artifacts: the CSV log, a JSON summary and three SVG panels.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{Scenario, Target};
use crate::sim::{Record, RunLog, TransitionCause};

/// Tolerances for the convergence times in the summary.
pub const POSITION_TOL: f64 = 1e-3;
pub const FORCE_TOL: f64 = 0.05;

pub fn write_csv<W: Write>(log: &RunLog, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(log.header())?;
    for r in &log.records {
        // Display prints the shortest string that reads back to the same f64
        wr.write_record(r.to_row().iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads records back, checking the header against the schema for `n`
/// actuated and `m` flexible joints.
pub fn read_csv<R: Read>(r: R, n: usize, m: usize) -> Result<Vec<Record>> {
    let mut rd = csv::Reader::from_reader(r);
    let expected = Record::header(n, m);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header != expected {
        return Err(Error::Config(format!(
            "CSV header does not match the log schema (expected {} columns, got {})",
            expected.len(),
            header.len()
        )));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let values = row
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad CSV value `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(Record::from_row(&values, n, m)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
            p50_us: percentile(&s, 0.50),
            p90_us: percentile(&s, 0.90),
            p99_us: percentile(&s, 0.99),
            max_us: s[s.len() - 1],
        })
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitorSummary {
    pub name: String,
    pub passed: bool,
    pub violations: usize,
    pub first_violation_t: Option<f64>,
    pub first_violation: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionSummary {
    pub t: f64,
    pub phase: usize,
    pub cause: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub kind: &'static str,
    pub start_t: f64,
    pub end_t: f64,
    /// Error tolerance for `converged_t` (m for position, N for force).
    pub tolerance: f64,
    /// Start of the final stretch during which the error stays below the
    /// tolerance, if the phase ends inside it.
    pub converged_t: Option<f64>,
    pub final_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub steps: usize,
    pub simulated_s: f64,
    pub control_dt: f64,
    pub completed: bool,
    pub error: Option<String>,
    /// `None` for logs read back from CSV, which carry no monitor results.
    pub monitors_passed: Option<bool>,
    pub monitors: Vec<MonitorSummary>,
    pub transitions: Vec<TransitionSummary>,
    pub phases: Vec<PhaseSummary>,
    pub v_initial: f64,
    pub v_final: f64,
    /// Largest one-step increase of V (0 when V never increases).
    pub max_v_increase: f64,
    pub final_position_error_m: f64,
    pub final_force_error_n: f64,
    pub timing: Option<Timing>,
}

/// True end-effector position error against the current reference.
pub fn position_error(r: &Record) -> f64 {
    ((r.q_r.x - r.p.x).powi(2) + (r.q_r.y - r.p.y).powi(2)).sqrt()
}

/// True force error.
pub fn force_error(r: &Record) -> f64 {
    (r.f_r - r.f_true).norm()
}

pub fn max_v_increase(records: &[Record]) -> f64 {
    records
        .windows(2)
        .map(|w| w[1].v - w[0].v)
        .fold(0.0, f64::max)
}

pub fn summarize(log: &RunLog, scenario: &Scenario, error: Option<&Error>) -> Result<Summary> {
    let first = log.records.first().ok_or(Error::EmptyLog)?;
    let last = log.records.last().ok_or(Error::EmptyLog)?;
    let mut phases = Vec::new();
    for (idx, range) in phase_ranges(&log.records) {
        let recs = &log.records[range];
        let (kind, tolerance, metric): (_, _, fn(&Record) -> f64) = match scenario.phases[idx].target {
            Target::Waypoint(_) => ("position", POSITION_TOL, position_error),
            Target::Force(_) => ("force", FORCE_TOL, force_error),
        };
        let tail = recs.iter().rev().take_while(|r| metric(r) < tolerance).count();
        phases.push(PhaseSummary {
            phase: idx,
            kind,
            start_t: recs[0].t,
            end_t: recs[recs.len() - 1].t,
            tolerance,
            converged_t: (tail > 0).then(|| recs[recs.len() - tail].t),
            final_error: metric(&recs[recs.len() - 1]),
        });
    }
    Ok(Summary {
        scenario: log.scenario.clone(),
        seed: log.seed,
        steps: log.records.len(),
        simulated_s: last.t + log.control_dt,
        control_dt: log.control_dt,
        completed: error.is_none(),
        error: error.map(|e| e.to_string()),
        monitors_passed: (!log.monitors.is_empty()).then(|| log.monitors_passed()),
        monitors: log
            .monitors
            .iter()
            .map(|m| MonitorSummary {
                name: m.name.to_string(),
                passed: m.passed(),
                violations: m.violations,
                first_violation_t: m.first.as_ref().map(|f| f.0),
                first_violation: m.first.as_ref().map(|f| f.1.clone()),
            })
            .collect(),
        transitions: log
            .transitions
            .iter()
            .map(|t| TransitionSummary {
                t: t.t,
                phase: t.phase,
                cause: match t.cause {
                    TransitionCause::Converged => "converged",
                    TransitionCause::Timeout => "timeout",
                    TransitionCause::Time => "time",
                },
            })
            .collect(),
        phases,
        v_initial: first.v,
        v_final: last.v,
        max_v_increase: max_v_increase(&log.records),
        final_position_error_m: position_error(last),
        final_force_error_n: force_error(last),
        timing: Timing::from_samples(&log.step_us),
    })
}

/// Consecutive runs of records sharing a phase index.
pub fn phase_ranges(records: &[Record]) -> Vec<(usize, Range<usize>)> {
    let mut out: Vec<(usize, Range<usize>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match out.last_mut() {
            Some((p, range)) if *p == r.phase => range.end = i + 1,
            _ => out.push((r.phase, i..i + 1)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Summary,
    Svg,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Csv, Format::Summary, Format::Svg];
}

pub const CSV_FILE: &str = "run.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILES: [&str; 3] = ["force_adaptive.svg", "pose.svg", "theta_hat.svg"];

/// Writes the requested artifacts into `dir` and returns their paths.
pub fn export(
    log: &RunLog,
    scenario: &Scenario,
    error: Option<&Error>,
    dir: &Path,
    formats: &[Format],
) -> Result<Vec<PathBuf>> {
    if log.records.is_empty() {
        return Err(Error::EmptyLog);
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            Format::Csv => {
                let path = dir.join(CSV_FILE);
                write_csv(log, BufWriter::new(File::create(&path)?))?;
                written.push(path);
            }
            Format::Summary => {
                let path = dir.join(SUMMARY_FILE);
                let summary = summarize(log, scenario, error)?;
                let mut w = BufWriter::new(File::create(&path)?);
                serde_json::to_writer_pretty(&mut w, &summary)?;
                writeln!(w)?;
                written.push(path);
            }
            Format::Svg => {
                let paths: Vec<PathBuf> = PLOT_FILES.iter().map(|n| dir.join(n)).collect();
                plot_force_adaptive(log, &paths[0])?;
                plot_pose(log, &paths[1])?;
                plot_theta(log, &paths[2])?;
                written.extend(paths);
            }
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// plots

const PANEL: (u32, u32) = (900, 320);
/// Long runs are thinned to about this many points per series.
const MAX_PLOT_POINTS: usize = 4000;

fn plot_stride(log: &RunLog) -> usize {
    log.records.len().div_ceil(MAX_PLOT_POINTS).max(1)
}

struct Series {
    label: String,
    color: RGBColor,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

fn series(log: &RunLog, label: impl Into<String>, color: RGBColor, dashed: bool, f: impl Fn(&Record) -> f64) -> Series {
    Series {
        label: label.into(),
        color,
        dashed,
        points: log.records.iter().step_by(plot_stride(log)).map(|r| (r.t, f(r))).collect(),
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn y_range(all: &[Series]) -> Range<f64> {
    let (lo, hi) = all
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return -1.0..1.0;
    }
    let pad = ((hi - lo) * 0.08).max(1e-9 + 1e-6 * hi.abs().max(lo.abs()));
    lo - pad..hi + pad
}

fn draw_panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    y_label: &str,
    t_end: f64,
    all: &[Series],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 16))
        .margin(8)
        .x_label_area_size(28)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..t_end, y_range(all))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("t [s]")
        .y_desc(y_label)
        .light_line_style(WHITE.mix(0.0))
        .draw()
        .map_err(plot_err)?;
    for s in all {
        let style = ShapeStyle::from(&s.color).stroke_width(if s.dashed { 1 } else { 2 });
        let anno = if s.dashed {
            chart
                .draw_series(DashedLineSeries::new(s.points.iter().copied(), 6, 4, style))
                .map_err(plot_err)?
        } else {
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), style))
                .map_err(plot_err)?
        };
        let c = s.color;
        anno.label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    Ok(())
}

fn t_end(log: &RunLog) -> f64 {
    log.records.last().map_or(1.0, |r| r.t).max(log.control_dt)
}

/// Force tracking and the two adaptive moduli.
fn plot_force_adaptive(log: &RunLog, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (PANEL.0, 2 * PANEL.1)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let areas = root.split_evenly((2, 1));
    let te = t_end(log);
    draw_panel(
        &areas[0],
        "Contact force",
        "f [N]",
        te,
        &[
            series(log, "f_x", BLUE, false, |r| r.f_true.x),
            series(log, "f_y", RED, false, |r| r.f_true.y),
            series(log, "f_r,x", BLUE, true, |r| r.f_r.x),
            series(log, "f_r,y", RED, true, |r| r.f_r.y),
        ],
    )?;
    draw_panel(
        &areas[1],
        "Adaptive contact moduli",
        "k_e estimate",
        te,
        &[
            series(log, "normal", BLUE, false, |r| r.ke_hat_top),
            series(log, "tangential", RED, false, |r| r.ke_hat_perp),
        ],
    )?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// End-effector pose against its reference.
fn plot_pose(log: &RunLog, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (PANEL.0, 3 * PANEL.1)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let areas = root.split_evenly((3, 1));
    let te = t_end(log);
    let rows: [(&str, &str, fn(&Record) -> f64, fn(&Record) -> f64); 3] = [
        ("x", "x [m]", |r| r.p.x, |r| r.q_r.x),
        ("y", "y [m]", |r| r.p.y, |r| r.q_r.y),
        ("alpha", "alpha [rad]", |r| r.alpha, |r| r.q_r.z),
    ];
    for (area, (name, unit, actual, reference)) in areas.iter().zip(rows) {
        draw_panel(
            area,
            &format!("End-effector {name}"),
            unit,
            te,
            &[
                series(log, name, BLUE, false, actual),
                series(log, "reference", BLACK, true, reference),
            ],
        )?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Every entry of the flexibility estimate.
fn plot_theta(log: &RunLog, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (PANEL.0, 3 * PANEL.1)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let areas = root.split_evenly((3, 1));
    let te = t_end(log);
    let m = log.m;
    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
        RGBColor(23, 190, 207),
    ];
    for (block, (area, title)) in areas
        .iter()
        .zip(["normal-force rows", "tangential-force rows", "gravity rows"])
        .enumerate()
    {
        let mut all = Vec::new();
        for row in 0..m {
            for col in 0..m {
                let idx = (block * m + row) * m + col;
                let color = palette[(row * m + col) % palette.len()];
                all.push(series(log, format!("[{row},{col}]"), color, col != row, move |r| {
                    r.theta_hat[idx]
                }));
            }
        }
        draw_panel(area, &format!("Flexibility estimate, {title}"), "value", te, &all)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}
