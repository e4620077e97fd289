//! `gridcp`: calibrated prediction intervals for gridded ensemble forecasts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridconformal::grid::LevelScheme;
use gridconformal::pipeline::{self, Method, PipelineConfig};
use gridconformal::Error;

#[derive(Parser, Debug)]
#[command(name = "gridcp", version, about = "Conformal prediction intervals for gridded ensembles")]
struct Cli {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// raw, split-cp or cqr
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Coverage level 1-α; repeat for several.
    #[arg(long = "level", global = true)]
    levels: Vec<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Noise seed of the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic calibration/test dataset.
    Synth,
    /// Convert stored ensembles to per-point quantile grids.
    Quantiles,
    /// Fit conformal offsets on the calibration split.
    Calibrate,
    /// Write calibrated intervals for the test split.
    Apply,
    /// Score the test split and write tables, maps and charts.
    Evaluate,
    /// Repeated-split coverage study on synthetic data.
    CoverageSim,
    /// Merge per-method evaluations into side-by-side tables.
    Report,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_BAND: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if matches!(e, Error::Config(_) | Error::InvalidScheme(_) | Error::InvalidLevel(_)) {
                EXIT_USAGE
            } else {
                EXIT_DATA
            };
            ExitCode::from(code)
        }
    }
}

fn build_config(cli: &Cli) -> gridconformal::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = cli.method {
        cfg.method = m;
    }
    if !cli.levels.is_empty() {
        cfg.levels = with_coverage(&cfg.levels, &cli.levels)?;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.synth.get_or_insert_with(Default::default).noise_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.dataset_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Keeps the configured quantile levels when they already hold both tails of
/// every requested coverage level; otherwise uses exactly those tails.
fn with_coverage(current: &LevelScheme, coverage: &[f64]) -> gridconformal::Result<LevelScheme> {
    let mut coverage = coverage.to_vec();
    coverage.sort_by(f64::total_cmp);
    coverage.dedup();
    LevelScheme::new(coverage.clone(), current.quantile_levels().to_vec())
        .or_else(|_| LevelScheme::from_coverage(coverage))
}

fn run(command: &Command, cfg: &PipelineConfig) -> gridconformal::Result<ExitCode> {
    match command {
        Command::Synth => {
            let m = pipeline::run_synth(cfg)?;
            println!(
                "{} calibration + {} test records ({}x{}) in {}",
                m.n_calibration,
                m.n_test,
                m.height,
                m.width,
                cfg.dataset_dir.display()
            );
        }
        Command::Quantiles => {
            let n = pipeline::run_quantiles(cfg)?;
            println!("{n} quantile sets in {}", cfg.output_dir.join("quantiles").display());
        }
        Command::Calibrate => match pipeline::run_calibrate(cfg)? {
            Some(off) => println!(
                "{} offsets from {} calibration records",
                cfg.method,
                off.calibration_size()
            ),
            None => println!("raw intervals need no calibration"),
        },
        Command::Apply => {
            let n = pipeline::run_apply(cfg)?;
            println!("{n} {} interval sets written", cfg.method);
        }
        Command::Evaluate => {
            let r = pipeline::run_evaluate(cfg)?;
            println!("{} over {} test records, {} grid points", cfg.method, r.records, r.valid_points);
            println!("{:>6} {:>8} {:>9} {:>9} {:>9}", "level", "PICP", "%dev", "IS", "IW");
            for c in &r.coverage {
                println!(
                    "{:>6} {:>8.4} {:>9.3} {:>9} {:>9}",
                    c.level,
                    c.mean_picp,
                    c.pct_deviation,
                    opt(c.mean_is),
                    opt(c.mean_iw)
                );
            }
        }
        Command::CoverageSim => {
            let s = pipeline::run_coverage_sim(cfg)?;
            println!(
                "{} coverage over {} trials (n = {}, {} test records each)",
                s.method, s.trials, s.n_calibration, s.n_test
            );
            for l in &s.levels {
                let band = match (l.band_lower, l.band_upper) {
                    (Some(a), Some(b)) => format!("[{a:.4}, {b:.4}]"),
                    _ => "-".into(),
                };
                println!(
                    "{:>6} mean {:.5} se {:.5} band {band}{}",
                    l.level,
                    l.mean,
                    l.se,
                    if l.violation { " VIOLATION" } else { "" }
                );
            }
            if s.violation {
                return Ok(ExitCode::from(EXIT_BAND));
            }
        }
        Command::Report => {
            let methods = pipeline::run_report(cfg)?;
            let names: Vec<&str> = methods.iter().map(|m| m.as_str()).collect();
            println!("report for {} in {}", names.join(", "), cfg.output_dir.join("report").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}
