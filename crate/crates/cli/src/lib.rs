//! Batch scenario runner: execute a sweep of (method, dt) pairs over one
//! scenario, write one CSV per run plus a plain-text summary.
//!
//! CSV schema (version 1), columns in order:
//!
//! ```text
//! t, theta[0..n), thetadot[0..n), K, f{c}x f{c}y f{c}z per contact,
//! d{c} per contact, tau[0..n), outer_iters, proj_iters, dt_realized_min,
//! status
//! ```
//!
//! All floats are printed in shortest round-trip form, so identical runs
//! produce byte-identical files. Sweep entries execute on a worker pool;
//! each file is written atomically (temp file + rename).

use anyhow::{bail, Context, Result};
use nalgebra::Vector3;
use nmdp_core::robot_model::{Method, RobotModel, ScenarioSpec};
use nmdp_core::stepper::{run_trajectory, TrajectoryRecord};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Metric series selectable in the summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    TorsoTilt,
    TorsoHeight,
    TravelDistance,
    Iterations,
    RealizedDt,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::TorsoTilt,
        MetricKind::TorsoHeight,
        MetricKind::TravelDistance,
        MetricKind::Iterations,
        MetricKind::RealizedDt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::TorsoTilt => "torso_tilt",
            MetricKind::TorsoHeight => "torso_height",
            MetricKind::TravelDistance => "travel_distance",
            MetricKind::Iterations => "iterations",
            MetricKind::RealizedDt => "realized_dt",
        }
    }

    pub fn parse(name: &str) -> Option<MetricKind> {
        MetricKind::ALL.iter().copied().find(|m| m.name() == name)
    }
}

/// One sweep: scenario file, methods, timestep sizes, outputs.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub scenario: PathBuf,
    pub methods: Vec<Method>,
    pub dts_ms: Vec<f64>,
    /// Override of the scenario's duration (s).
    pub duration: Option<f64>,
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricKind>,
    pub workers: usize,
}

/// Per-frame metric series extracted from a trajectory.
#[derive(Debug, Clone)]
pub struct MetricSeries {
    pub t: Vec<f64>,
    /// Angle between the base link's up axis and world vertical (rad).
    pub torso_tilt: Vec<f64>,
    /// Base origin height along world up (m).
    pub torso_height: Vec<f64>,
    /// Horizontal displacement of the base origin from its start (m).
    pub travel_distance: Vec<f64>,
    pub outer_iterations: Vec<usize>,
    pub realized_dt_min: Vec<f64>,
}

/// Compute the metric series for a record. The base is the first link; the
/// up direction opposes gravity (world +z when gravity vanishes).
pub fn metrics(record: &TrajectoryRecord, model: &RobotModel, gravity: &Vector3<f64>) -> MetricSeries {
    let up = if gravity.norm() > 0.0 {
        -gravity / gravity.norm()
    } else {
        Vector3::z()
    };
    let mut series = MetricSeries {
        t: Vec::with_capacity(record.frames.len()),
        torso_tilt: Vec::new(),
        torso_height: Vec::new(),
        travel_distance: Vec::new(),
        outer_iterations: Vec::new(),
        realized_dt_min: Vec::new(),
    };
    let mut origin: Option<Vector3<f64>> = None;
    for frame in &record.frames {
        series.t.push(frame.t);
        series.outer_iterations.push(frame.outer_iters);
        series.realized_dt_min.push(frame.dt_realized_min);
        if frame.theta.iter().all(|v| v.is_finite()) {
            let poses = nmdp_core::kinematics::fk_poses(model, &frame.theta).expect("finite");
            let base = &poses[0];
            let tilt = (base.rot * up).dot(&up).clamp(-1.0, 1.0).acos();
            let height = up.dot(&base.pos);
            let start = *origin.get_or_insert(base.pos);
            let disp = base.pos - start;
            let horizontal = disp - up * disp.dot(&up);
            series.torso_tilt.push(tilt);
            series.torso_height.push(height);
            series.travel_distance.push(horizontal.norm());
        } else {
            series.torso_tilt.push(f64::NAN);
            series.torso_height.push(f64::NAN);
            series.travel_distance.push(f64::NAN);
        }
    }
    series
}

/// Outcome of one (method, dt) run.
pub struct RunOutcome {
    pub method: Method,
    pub dt_ms: f64,
    pub file: String,
    pub result: std::result::Result<TrajectoryRecord, String>,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        matches!(&self.result, Ok(r) if r.diverged)
    }

    pub fn failed(&self) -> bool {
        self.result.is_err()
    }
}

pub struct SweepResult {
    pub outcomes: Vec<RunOutcome>,
    pub summary_path: PathBuf,
}

impl SweepResult {
    /// Process exit code: 0 clean, 2 when any run diverged or hard-failed.
    pub fn exit_code(&self) -> i32 {
        if self.outcomes.iter().any(|o| o.diverged() || o.failed()) {
            2
        } else {
            0
        }
    }
}

fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn dt_label(dt_ms: f64) -> String {
    let s = format!("{dt_ms}");
    s.replace('.', "p")
}

pub fn csv_file_name(method: Method, dt_ms: f64) -> String {
    format!("{}_dt{}ms.csv", method.name(), dt_label(dt_ms))
}

/// Render one trajectory as CSV text.
pub fn record_to_csv(record: &TrajectoryRecord) -> String {
    let n = record.dof_count;
    let c = record.contact_count;
    let mut out = String::new();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..n).map(|i| format!("theta{i}")));
    header.extend((0..n).map(|i| format!("thetadot{i}")));
    header.push("K".into());
    for ci in 0..c {
        header.push(format!("f{ci}x"));
        header.push(format!("f{ci}y"));
        header.push(format!("f{ci}z"));
    }
    header.extend((0..c).map(|ci| format!("d{ci}")));
    header.extend((0..n).map(|i| format!("tau{i}")));
    header.push("outer_iters".into());
    header.push("proj_iters".into());
    header.push("dt_realized_min".into());
    header.push("status".into());
    out.push_str(&header.join(","));
    out.push('\n');

    for frame in &record.frames {
        let mut row: Vec<String> = vec![format_float(frame.t)];
        row.extend(frame.theta.iter().map(|&v| format_float(v)));
        row.extend(frame.theta_dot.iter().map(|&v| format_float(v)));
        row.push(format_float(frame.kinetic));
        for ci in 0..c {
            match frame.forces.get(ci) {
                Some(f) => {
                    row.push(format_float(f.force.x));
                    row.push(format_float(f.force.y));
                    row.push(format_float(f.force.z));
                }
                None => {
                    row.push("NaN".into());
                    row.push("NaN".into());
                    row.push("NaN".into());
                }
            }
        }
        for ci in 0..c {
            row.push(format_float(frame.forces.get(ci).map_or(f64::NAN, |f| f.depth)));
        }
        row.extend(frame.tau.iter().map(|&v| format_float(v)));
        row.push(frame.outer_iters.to_string());
        row.push(frame.proj_iters.to_string());
        row.push(format_float(frame.dt_realized_min));
        row.push(frame.status.as_str().into());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    let target = dir.join(name);
    tmp.persist(&target)
        .with_context(|| format!("renaming into {}", target.display()))?;
    Ok(target)
}

/// Relative spread of a series of final values: (max - min) / max(|mean|, eps).
fn spread(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return f64::NAN;
    }
    let max = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    (max - min) / mean.abs().max(1e-12)
}

/// Execute the sweep: one CSV per (method, dt) plus `summary.txt`.
pub fn run(manifest: &RunManifest) -> Result<SweepResult> {
    if manifest.methods.is_empty() || manifest.dts_ms.is_empty() {
        bail!("need at least one method and one dt");
    }
    let text = std::fs::read_to_string(&manifest.scenario)
        .with_context(|| format!("reading {}", manifest.scenario.display()))?;
    let base = ScenarioSpec::from_toml_str(&text)
        .with_context(|| format!("parsing {}", manifest.scenario.display()))?;
    std::fs::create_dir_all(&manifest.out_dir)
        .with_context(|| format!("creating {}", manifest.out_dir.display()))?;

    let runs: Vec<(Method, f64)> = manifest
        .methods
        .iter()
        .flat_map(|&m| manifest.dts_ms.iter().map(move |&dt| (m, dt)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.workers.max(1))
        .build()
        .context("building worker pool")?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        runs.par_iter()
            .map(|&(method, dt_ms)| {
                let mut scenario = base.clone();
                scenario.method = method;
                scenario.dt_primary = dt_ms / 1000.0;
                if let Some(d) = manifest.duration {
                    scenario.duration = d;
                }
                let result = run_trajectory(&scenario).map_err(|e| e.to_string());
                RunOutcome {
                    method,
                    dt_ms,
                    file: csv_file_name(method, dt_ms),
                    result,
                }
            })
            .collect()
    });

    for outcome in &outcomes {
        if let Ok(record) = &outcome.result {
            let csv = record_to_csv(record);
            write_atomic(&manifest.out_dir, &outcome.file, &csv)?;
        }
    }

    let summary = render_summary(manifest, &base, &outcomes);
    let summary_path = write_atomic(&manifest.out_dir, "summary.txt", &summary)?;
    Ok(SweepResult {
        outcomes,
        summary_path,
    })
}

fn render_summary(manifest: &RunManifest, base: &ScenarioSpec, outcomes: &[RunOutcome]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "schema_version {CSV_SCHEMA_VERSION}");
    let _ = writeln!(out, "scenario {}", manifest.scenario.display());
    let _ = writeln!(
        out,
        "runs {} (methods {} x dt {})",
        outcomes.len(),
        manifest.methods.len(),
        manifest.dts_ms.len()
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>10} {:>8} {:>12} {:>14} {:>12} {:>12}",
        "method", "dt_ms", "status", "frames", "mean_outer", "min_dt_real", "final_height", "final_tilt"
    );
    for o in outcomes {
        match &o.result {
            Ok(record) => {
                let series = metrics(record, &base.robot, &base.gravity);
                let frames = record.frames.len();
                let mean_outer = if frames > 1 {
                    series.outer_iterations.iter().sum::<usize>() as f64 / (frames - 1) as f64
                } else {
                    0.0
                };
                let min_dt = series
                    .realized_dt_min
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                let status = if record.diverged { "diverged" } else { "ok" };
                let _ = writeln!(
                    out,
                    "{:<16} {:>8} {:>10} {:>8} {:>12.3} {:>14} {:>12} {:>12}",
                    o.method.name(),
                    format_float(o.dt_ms),
                    status,
                    frames,
                    mean_outer,
                    format_float(min_dt),
                    format_float(*series.torso_height.last().unwrap_or(&f64::NAN)),
                    format_float(*series.torso_tilt.last().unwrap_or(&f64::NAN)),
                );
            }
            Err(message) => {
                let _ = writeln!(
                    out,
                    "{:<16} {:>8} {:>10} {:>8} {:>12} {:>14} {:>12} {:>12}  # {}",
                    o.method.name(),
                    format_float(o.dt_ms),
                    "failed",
                    "-",
                    "-",
                    "-",
                    "-",
                    "-",
                    message
                );
            }
        }
    }

    // Per-method spread of each selected metric's final value across dt.
    let _ = writeln!(out);
    let _ = writeln!(out, "spread across dt (relative, final values):");
    for &method in &manifest.methods {
        for &metric in &manifest.metrics {
            let finals: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.method == method)
                .map(|o| match &o.result {
                    Ok(record) => {
                        let series = metrics(record, &base.robot, &base.gravity);
                        match metric {
                            MetricKind::TorsoTilt => *series.torso_tilt.last().unwrap_or(&f64::NAN),
                            MetricKind::TorsoHeight => {
                                *series.torso_height.last().unwrap_or(&f64::NAN)
                            }
                            MetricKind::TravelDistance => {
                                *series.travel_distance.last().unwrap_or(&f64::NAN)
                            }
                            MetricKind::Iterations => {
                                series.outer_iterations.iter().sum::<usize>() as f64
                                    / series.outer_iterations.len().max(1) as f64
                            }
                            MetricKind::RealizedDt => series
                                .realized_dt_min
                                .iter()
                                .copied()
                                .fold(f64::INFINITY, f64::min),
                        }
                    }
                    Err(_) => f64::NAN,
                })
                .collect();
            let _ = writeln!(
                out,
                "  {:<16} {:<16} {}",
                method.name(),
                metric.name(),
                format_float(spread(&finals))
            );
        }
    }
    out
}
