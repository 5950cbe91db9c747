//! Command-line front end: run simulation scenarios, replay message logs
//! through the filter, and evaluate track logs with OSPA-T.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use lmbfuse::lmb::FilterConfig;
use lmbfuse::metrics::{ospat_curve, OspatConfig, TrackSnapshot};
use lmbfuse::pipeline;
use lmbfuse::sim::{parse_track_csv, run_monte_carlo, ScenarioConfig, SIGMA_GRID};

#[derive(Parser)]
#[command(name = "lmbfuse", version, about = "Multi-sensor LMB tracking: simulate, replay, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo batch of one simulation scenario and write CSV
    /// results plus per-trial downlink logs.
    Simulate {
        /// Scenario id: 1 (position only) or 2 (position plus one extent).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        scenario: u8,
        /// Measurement noise level; one of 0.5, 1.0, 1.5.
        #[arg(long, value_parser = parse_sigma)]
        sigma: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for the trial batch (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        /// Let sensors transmit their reference point instead of leaving the
        /// selection to the filter.
        #[arg(long)]
        transmit_ref_points: bool,
    },
    /// Stream recorded registration and uplink logs through the filter and
    /// write the downlink log.
    Replay {
        #[arg(long)]
        registrations: PathBuf,
        #[arg(long)]
        uplink: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = pipeline::DEFAULT_T_CYCLE)]
        t_cycle: f64,
    },
    /// Compute the per-step OSPA-T curve of a track log against a truth log
    /// and print it as CSV.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        /// Metric order.
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        /// Cut-off distance in meters.
        #[arg(long, default_value_t = 300.0)]
        c: f64,
        /// Labeling penalty; defaults to the cut-off.
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn parse_sigma(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if SIGMA_GRID.iter().any(|g| (g - v).abs() < 1e-12) {
        Ok(v)
    } else {
        Err(format!("sigma must be one of 0.5, 1.0, 1.5; got {s}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate {
            scenario,
            sigma,
            trials,
            seed,
            out,
            jobs,
            steps,
            dt,
            transmit_ref_points,
        } => {
            if let Some(jobs) = jobs {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build_global()
                    .context("configuring worker threads")?;
            }
            let mut cfg = ScenarioConfig::for_scenario(scenario, sigma)?;
            cfg.trials = trials;
            cfg.seed = seed;
            cfg.steps = steps;
            cfg.dt = dt;
            cfg.transmit_reference_points = transmit_ref_points;
            if trials == 0 {
                bail!("at least one trial is required");
            }
            let result = run_monte_carlo(&cfg).context("running the trial batch")?;
            result
                .write_outputs(&out)
                .with_context(|| format!("writing results to {}", out.display()))?;
            log::info!(
                "{} trials of scenario {} (sigma {}) written to {}",
                trials,
                scenario,
                sigma,
                out.display()
            );
            Ok(())
        }
        Command::Replay { registrations, uplink, out, t_cycle } => {
            let regs = std::fs::read_to_string(&registrations)
                .with_context(|| format!("reading {}", registrations.display()))?;
            let msgs = std::fs::read_to_string(&uplink)
                .with_context(|| format!("reading {}", uplink.display()))?;
            let outcome = pipeline::replay(
                &regs,
                &msgs,
                FilterConfig::default(),
                t_cycle,
                pipeline::DEFAULT_PRODUCER,
            )?;
            std::fs::write(&out, outcome.downlink)
                .with_context(|| format!("writing {}", out.display()))?;
            log::info!("replayed {} cycles to {}", outcome.cycles, out.display());
            Ok(())
        }
        Command::Eval { truth, tracks, p, c, alpha } => {
            let truth_text = std::fs::read_to_string(&truth)
                .with_context(|| format!("reading {}", truth.display()))?;
            let tracks_text = std::fs::read_to_string(&tracks)
                .with_context(|| format!("reading {}", tracks.display()))?;
            let truth_steps = parse_track_csv(&truth_text)?;
            let track_steps = parse_track_csv(&tracks_text)?;
            if truth_steps.is_empty() {
                bail!("truth log contains no steps");
            }
            if let Some(stray) = track_steps.keys().find(|k| !truth_steps.contains_key(k)) {
                bail!("mismatched step ranges: tracks contain step {stray} absent from the truth");
            }
            let cfg = OspatConfig { p, cutoff: c, alpha: alpha.unwrap_or(c) };
            let keys: Vec<u64> = truth_steps.keys().copied().collect();
            let truth_seq: Vec<Vec<TrackSnapshot>> =
                keys.iter().map(|k| truth_steps[k].clone()).collect();
            let est_seq: Vec<Vec<TrackSnapshot>> = keys
                .iter()
                .map(|k| track_steps.get(k).cloned().unwrap_or_default())
                .collect();
            let (curve, _) = ospat_curve(&truth_seq, &est_seq, &cfg);
            println!("k,ospat");
            for (k, v) in keys.iter().zip(curve.iter()) {
                println!("{k},{v}");
            }
            Ok(())
        }
    }
}
