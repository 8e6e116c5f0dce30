use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fredholm_mc_cli::config::{resolve, Overrides};
use fredholm_mc_cli::pipeline;
use fredholm_mc_cli::CliError;

/// Monte Carlo solvers for Fredholm integral equations of the second kind.
#[derive(Parser)]
#[command(name = "fredholm-mc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (flat key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV and JSON artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Method override: dtm, recursive or reference.
    #[arg(long)]
    method: Option<String>,
    /// Band level override.
    #[arg(long)]
    level: Option<f64>,
    /// Gaussian supremum simulation count override.
    #[arg(long)]
    sims: Option<u64>,
    /// Outer trial count override (coverage).
    #[arg(long)]
    trials: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: solve, optionally band, write artifacts.
    Solve(CommonArgs),
    /// Sweep budgets and compare draw costs at matched accuracy.
    Compare(CommonArgs),
    /// Repeat the full pipeline and measure band coverage.
    Coverage(CommonArgs),
    /// Fit the subgaussian tail constant from pilot runs.
    Calibrate(CommonArgs),
    /// Re-run a recorded report and verify artifacts byte for byte.
    Replay {
        /// Path to an existing report.json.
        #[arg(long)]
        report: PathBuf,
        /// Directory the regenerated artifacts are written to.
        #[arg(long, default_value = "replay-out")]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<fredholm_mc_cli::config::ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let overrides = Overrides {
        seed: args.seed,
        method: args.method.clone(),
        level: args.level,
        sims: args.sims,
        trials: args.trials,
    };
    resolve(&text, &overrides)
}

fn configure_threads() {
    if let Ok(raw) = std::env::var("FREDHOLM_MC_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    match cli.command {
        Command::Solve(args) => {
            let cfg = load_config(&args)?;
            let report = pipeline::run_solve(&cfg, &args.out)?;
            println!(
                "solve: method={} depth={} draws={} grid_max_error={} seed={}",
                cfg.method.as_str(),
                report.depth,
                report.draws,
                report
                    .grid_max_error
                    .map(|e| e.to_string())
                    .unwrap_or_else(|| "unavailable".into()),
                cfg.seed,
            );
            if let Some(band) = &report.band {
                println!(
                    "band: kind={} level={} half_width={} covers_oracle={}",
                    band.kind,
                    band.level,
                    band.half_width,
                    band.covers_oracle
                        .map(|c| c.to_string())
                        .unwrap_or_else(|| "unavailable".into()),
                );
            }
            println!("artifacts: {}", args.out.display());
        }
        Command::Compare(args) => {
            let cfg = load_config(&args)?;
            let report = pipeline::run_compare(&cfg, &args.out)?;
            for row in &report.rows {
                println!(
                    "compare: budget={} status={} dtm_draws={} rec_draws={} draw_ratio={}",
                    row.budget, row.status, row.dtm_draws, row.rec_draws, row.draw_ratio
                );
            }
            println!("artifacts: {}", args.out.display());
        }
        Command::Coverage(args) => {
            let cfg = load_config(&args)?;
            let report = pipeline::run_coverage(&cfg, &args.out)?;
            println!(
                "coverage: band={} level={} trials={} covered={} coverage={}",
                report.band_kind, report.level, report.trials, report.covered, report.coverage
            );
            println!("artifacts: {}", args.out.display());
        }
        Command::Calibrate(args) => {
            let cfg = load_config(&args)?;
            let report = pipeline::run_calibrate(&cfg, &args.out)?;
            println!(
                "calibrate: pilot_trials={} c3={}",
                report.pilot_trials,
                report
                    .c3
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "infinite".into()),
            );
            println!("artifacts: {}", args.out.display());
        }
        Command::Replay { report, out } => {
            let outcome = pipeline::run_replay(&report, &out)?;
            for (name, ok) in &outcome.checked {
                println!("replay: {name} {}", if *ok { "MATCH" } else { "MISMATCH" });
            }
            if !outcome.all_match() {
                return Err(CliError::Config("replay produced different bytes".into()));
            }
            println!("replay: all artifacts byte-identical");
        }
    }
    eprintln!("wall time: {:.3} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
