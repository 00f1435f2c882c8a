//! Thin command-line front end; all logic lives in the library.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use torusdiff::diagnostics::{
    autocorrelation, block_dependence_profile, quadratic_variation_probe, stationarity_test,
    write_autocorrelation_csv, write_occupancy_csv, write_summary_json, DiagnosticsSummary,
};
use torusdiff::error::{Error, Result};
use torusdiff::estimator::PairManifest;
use torusdiff::harness::emit::{emit_outputs, parse_sweep_csv};
use torusdiff::harness::{fit_rate, parse_config, run_single, run_sweep, RunConfig, Scheme};
use torusdiff::sim::subsample;

#[derive(Parser)]
#[command(
    name = "torusdiff",
    about = "Simulate SDEs on the torus and infer their drift and diffusion fields from one trajectory"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    A,
    B,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the master trajectory and write it as CSV plus metadata.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one (tau, T) instance: train both estimators, save checkpoints,
    /// print the result row.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the master seed and the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a convergence sweep and emit sweep.csv, summary.json and
    /// rate_plot.svg.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scheme in the config file.
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        /// Replaces the seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ergodicity and mixing diagnostics on the configured instance.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        max_lag: usize,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a log-log rate to an existing sweep.csv.
    RateFit {
        #[arg(long)]
        csv: PathBuf,
        /// drift_loss | diffusion_loss | f_recovery_error
        #[arg(long, default_value = "diffusion_loss")]
        metric: String,
    },
}

fn apply_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.master.seed = s;
        cfg.train.seed = s;
        if let Some(sweep) = &mut cfg.sweep {
            sweep.seeds = vec![s];
        }
    }
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(Error::io(cfg.output_dir.clone()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, seed } => {
            let mut cfg = parse_config(&config)?;
            apply_seed(&mut cfg, seed);
            ensure_output_dir(&cfg)?;
            let model = cfg.build_model()?;
            let traj = torusdiff::harness::simulate_master(&cfg, model.as_ref())?;
            let path = cfg.output_dir.join("trajectory.csv");
            traj.write_csv(&path)?;
            println!(
                "simulated {} steps of {} (tau0 = {}, T0 = {}) -> {}",
                traj.len() - 1,
                cfg.model,
                cfg.master.tau0,
                traj.t0(),
                path.display()
            );
            Ok(())
        }
        Cmd::Estimate { config, seed } => {
            let mut cfg = parse_config(&config)?;
            apply_seed(&mut cfg, seed);
            ensure_output_dir(&cfg)?;
            let (row, pair) = run_single(&cfg)?;
            if let Some(pair) = &pair {
                let manifest = PairManifest {
                    model: cfg.model.clone(),
                    seed: row.seed,
                    n: row.n,
                    tau: row.tau,
                    t_horizon: row.t_horizon,
                    config_hash: cfg.hash(),
                };
                pair.save(&cfg.output_dir, &manifest)?;
            }
            println!(
                "N = {}, tau = {}, T = {}: drift_loss = {:.6e}, diffusion_loss = {:.6e}, f_recovery_error = {:.6e} [{}]",
                row.n, row.tau, row.t_horizon, row.drift_loss, row.diffusion_loss,
                row.f_recovery_error, row.status
            );
            if row.is_ok() {
                println!("checkpoints in {}", cfg.output_dir.display());
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "instance did not complete: {}",
                    row.status
                )))
            }
        }
        Cmd::Sweep {
            config,
            scheme,
            seed,
        } => {
            let mut cfg = parse_config(&config)?;
            if let (Some(s), Some(sweep)) = (scheme, &mut cfg.sweep) {
                sweep.scheme = match s {
                    SchemeArg::A => Scheme::A,
                    SchemeArg::B => Scheme::B,
                };
            }
            apply_seed(&mut cfg, seed);
            cfg.validate()?;
            let result = run_sweep(&cfg)?;
            let paths = emit_outputs(&result, &cfg, &cfg.output_dir)?;
            for a in &result.aggregates {
                println!(
                    "scheme {} N = {:>8}: diffusion_loss = {:.6e} +- {:.2e} ({} ok)",
                    a.scheme, a.n, a.mean_diffusion_loss, a.ci_diffusion_loss, a.num_ok
                );
            }
            if let Some(fit) = &result.rate_fit {
                println!(
                    "log-log slope over the first {} points: {:.3}",
                    result.fit_segment_len, fit.slope
                );
            }
            println!("wrote {}", paths.csv.display());
            Ok(())
        }
        Cmd::Diagnose {
            config,
            max_lag,
            bins,
            seed,
        } => {
            let mut cfg = parse_config(&config)?;
            apply_seed(&mut cfg, seed);
            let inst = cfg.instance.ok_or_else(|| Error::Config {
                key: "instance".into(),
                message: "diagnose needs an instance block".into(),
            })?;
            ensure_output_dir(&cfg)?;
            let model = cfg.build_model()?;
            let master = torusdiff::harness::simulate_master(&cfg, model.as_ref())?;
            // initial transient: drop the leading 5% before any diagnostic
            let burned = master.burn_in(0.05);
            let obs = subsample(&burned, inst.tau, inst.t_horizon.min(burned.t0()))
                .map_err(|e| e.in_stage("subsample"))?;
            let observable =
                |x: &[f64]| (2.0 * std::f64::consts::PI * x[0]).sin();
            let acf = autocorrelation(&obs, &observable, max_lag.min(obs.num_increments() / 4 - 1))
                .map_err(|e| e.in_stage("diagnose"))?;
            let stationarity =
                stationarity_test(&obs, bins).map_err(|e| e.in_stage("diagnose"))?;
            let qv = quadratic_variation_probe(&obs, model.as_ref())
                .map_err(|e| e.in_stage("diagnose"))?;
            let l_values: Vec<usize> = [1usize, 2, 5, 10, 20, 50, 100]
                .into_iter()
                .filter(|&l| obs.num_increments() / l >= 2)
                .collect();
            let profile = block_dependence_profile(&obs, &observable, &l_values)
                .map_err(|e| e.in_stage("diagnose"))?;

            write_autocorrelation_csv(&acf, &cfg.output_dir.join("autocorrelation.csv"))?;
            write_occupancy_csv(&stationarity, &cfg.output_dir.join("occupancy.csv"))?;
            let summary = DiagnosticsSummary {
                autocorrelation_rate: acf.fitted_rate,
                autocorrelation_r2: acf.fit_quality,
                stationarity_max_rel_deviation: stationarity.max_rel_deviation,
                stationarity_chi_square: stationarity.chi_square,
                qv_discrepancy: qv,
                block_profile: profile,
            };
            write_summary_json(&summary, &cfg.output_dir.join("diagnostics.json"))?;
            println!(
                "autocorrelation decay rate {:.4} (R^2 = {:.3}); occupancy max deviation {:.4}; qv probe {:.4e}",
                summary.autocorrelation_rate,
                summary.autocorrelation_r2,
                summary.stationarity_max_rel_deviation,
                summary.qv_discrepancy
            );
            println!("reports in {}", cfg.output_dir.display());
            Ok(())
        }
        Cmd::RateFit { csv, metric } => {
            let rows = parse_sweep_csv(&csv)?;
            let metric_fn: fn(&torusdiff::harness::SweepRow) -> f64 = match metric.as_str() {
                "drift_loss" => |r| r.drift_loss,
                "diffusion_loss" => |r| r.diffusion_loss,
                "f_recovery_error" => |r| r.f_recovery_error,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unknown metric `{other}`; expected drift_loss, diffusion_loss or f_recovery_error"
                    )))
                }
            };
            // aggregate the metric per N over ok rows, then fit the
            // strictly-decreasing prefix
            let mut by_n: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
            for r in rows.iter().filter(|r| r.is_ok()) {
                let v = metric_fn(r);
                if v.is_finite() {
                    by_n.entry(r.n).or_default().push(v);
                }
            }
            let points: Vec<(f64, f64)> = by_n
                .iter()
                .map(|(&n, vs)| (n as f64, vs.iter().sum::<f64>() / vs.len() as f64))
                .collect();
            if points.len() < 2 {
                return Err(Error::InvalidInput(
                    "rate-fit needs at least two grid points with finite data".into(),
                ));
            }
            let mut segment = 1usize;
            while segment < points.len() && points[segment].1 < points[segment - 1].1 {
                segment += 1;
            }
            let fit = fit_rate(&points, 0..segment.max(2))?;
            println!(
                "{{\"metric\":\"{metric}\",\"points\":{},\"segment\":{},\"slope\":{},\"intercept\":{}}}",
                points.len(),
                segment,
                fit.slope,
                fit.intercept
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
