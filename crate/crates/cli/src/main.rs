use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use salera_core::analysis::{cost_curve, default_zeta_grid, write_cost_csv, write_moments_csv};
use salera_core::harness::train::summary_line;
use salera_core::harness::verify::MOMENT_REPS;
use salera_core::harness::{run_grid, run_training, verify_gradcheck, verify_moments, verify_zeta, Check, GridSpec, RunConfig};

#[derive(Parser)]
#[command(name = "salera", version, about = "Agnostic learning-rate adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every cell of a grid spec over several seeds.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in verification suite.
    Verify {
        #[arg(value_enum)]
        kind: VerifyKind,
        /// Monte Carlo replicas per cell (moments only).
        #[arg(long, default_value_t = MOMENT_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of the simulated moments (moments only).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the cost curve J(zeta) for one cost constant as CSV.
    AnalyzeZeta {
        #[arg(long)]
        cconst: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyKind {
    Moments,
    Zeta,
    Gradcheck,
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{c}");
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    println!("summary {passed}/{} passed", checks.len());
    passed == checks.len()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = RunConfig::default();
            for (k, v) in salera_core::harness::config::parse_pairs(&text)? {
                cfg.set(&k, &v)?;
            }
            for o in &overrides {
                let Some((k, v)) = o.split_once('=') else {
                    bail!("override `{o}` is not key=value");
                };
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.out = out;
            }
            cfg.validate()?;
            let record = run_training(&cfg)?;
            println!("{}", summary_line(&record.summary));
            Ok(true)
        }
        Command::Grid { spec, seeds, jobs, out } => {
            let mut grid = GridSpec::from_file(&spec)?;
            if let Some(s) = seeds {
                grid.seeds = s;
            }
            if let Some(j) = jobs {
                grid.jobs = j;
            }
            if out.is_some() {
                grid.out = out;
            }
            let report = run_grid(&grid)?;
            println!("label\truns\tfailures\terr5_mean\terr5_std\terr_final_mean\terr_final_std");
            let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            for c in &report.cells {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    c.label,
                    c.runs,
                    c.failures,
                    f(c.mean_error_5),
                    f(c.std_error_5),
                    f(c.mean_error_final),
                    f(c.std_error_final)
                );
                for e in &c.errors {
                    println!("  error: {e}");
                }
            }
            for b in &report.best {
                println!(
                    "best model={} epochs={} {} {:.4} +- {:.4}",
                    b.model, b.epoch_mark, b.label, b.mean_error, b.std_error
                );
            }
            for (opt, rate) in &report.failure_rate {
                println!("failure_rate optimizer={opt} {rate:.4}");
            }
            Ok(true)
        }
        Command::Verify { kind, reps, seed, csv } => {
            let checks = match kind {
                VerifyKind::Moments => {
                    let (checks, rows) = verify_moments(reps, seed)?;
                    if let Some(path) = csv {
                        write_moments_csv(&path, &rows)?;
                    }
                    checks
                }
                VerifyKind::Zeta => verify_zeta()?,
                VerifyKind::Gradcheck => verify_gradcheck(seed)?,
            };
            Ok(report(&checks))
        }
        Command::AnalyzeZeta { cconst, out } => {
            let curve = cost_curve(cconst, &default_zeta_grid())?;
            write_cost_csv(&out, &curve)?;
            println!("argmin zeta={:.6} J={:.6}", curve.argmin, curve.min);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
