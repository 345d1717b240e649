use anyhow::{bail, Result};
use clap::Parser;
use nmdp_cli::{run, MetricKind, RunManifest};
use nmdp_core::robot_model::Method;
use std::path::PathBuf;

/// Batch runner: simulate one scenario under a sweep of methods and
/// timestep sizes, writing one CSV per run and a summary table.
#[derive(Parser, Debug)]
#[command(name = "nmdp-sim", version, about)]
struct Args {
    /// Scenario description file (TOML).
    #[arg(long)]
    scenario: PathBuf,

    /// Methods to run, comma separated
    /// (ne_mdp, ne_nmdp_pgm, ne_nmdp_zopgm, pbd_nmdp_pgm, pbd_nmdp_zopgm).
    #[arg(long, value_delimiter = ',', default_value = "ne_nmdp_pgm")]
    method: Vec<String>,

    /// Primary timestep sizes in milliseconds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    dt: Vec<f64>,

    /// Override the scenario's duration (seconds).
    #[arg(long)]
    duration: Option<f64>,

    /// Output directory for CSV files and the summary.
    #[arg(long)]
    out: PathBuf,

    /// Metrics for the summary spread table, comma separated
    /// (torso_tilt, torso_height, travel_distance, iterations, realized_dt).
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,

    /// Worker threads for the sweep.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn build_manifest(args: &Args) -> Result<RunManifest> {
    let mut methods = Vec::new();
    for name in &args.method {
        match Method::parse(name) {
            Some(m) => methods.push(m),
            None => bail!("unknown method `{name}`"),
        }
    }
    let metrics = match &args.metrics {
        None => MetricKind::ALL.to_vec(),
        Some(names) => {
            let mut out = Vec::new();
            for name in names {
                match MetricKind::parse(name) {
                    Some(m) => out.push(m),
                    None => bail!("unknown metric `{name}`"),
                }
            }
            out
        }
    };
    if args.dt.iter().any(|&d| !(d > 0.0)) {
        bail!("dt values must be positive");
    }
    Ok(RunManifest {
        scenario: args.scenario.clone(),
        methods,
        dts_ms: args.dt.clone(),
        duration: args.duration,
        out_dir: args.out.clone(),
        metrics,
        workers: args.workers,
    })
}

fn main() {
    let args = Args::parse();
    let manifest = match build_manifest(&args) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    match run(&manifest) {
        Ok(result) => {
            for o in &result.outcomes {
                let status = match &o.result {
                    Ok(r) if r.diverged => "diverged",
                    Ok(_) => "ok",
                    Err(_) => "failed",
                };
                println!("{:<16} dt={:<6} {}", o.method.name(), o.dt_ms, status);
            }
            println!("summary: {}", result.summary_path.display());
            std::process::exit(result.exit_code());
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
