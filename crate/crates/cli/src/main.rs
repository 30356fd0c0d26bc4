//! `snrl`: train, evaluate, sweep, probe and plot from the command line.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when
//! a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snrl::harness::config::{ExperimentConfig, Preset};
use snrl::harness::runner::{eval_checkpoint, probe_checkpoint, run_experiment, run_sweep};
use snrl::harness::{emit_plot, SweepConfig};
use snrl::Error;

#[derive(Parser, Debug)]
#[command(name = "snrl", version, about = "Spectral normalisation experiments for DQN agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one config, once per seed, writing CSV logs and checkpoints.
    Train {
        /// JSON experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// minatar-b1 or atari-c1.
        #[arg(long)]
        preset: Option<String>,
        /// Train only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (SNRL_OUT takes precedence).
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Print the resolved config and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint and print the result as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an (η, ε, arch, mode) grid and write the cell table as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Print the number of runs and cells and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Measure radii, Lipschitz bound, Jacobian norm and effective rank of
    /// a checkpoint on on-policy states.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render CSV logs as an SVG line plot.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Columns to draw; all non-step columns by default.
        #[arg(long)]
        column: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// File name of the SVG inside the output directory.
        #[arg(long, default_value = "plot.svg")]
        name: String,
    },
}

// A closed pipe (`snrl ... | head`) is not an error worth panicking over.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn out_dir(flag: PathBuf) -> PathBuf {
    match std::env::var_os("SNRL_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag,
    }
}

fn preset(name: Option<&str>) -> Result<Option<Preset>, Failure> {
    name.map(Preset::parse).transpose().map_err(usage)
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            preset: p,
            seed,
            out,
            dry_run,
        } => {
            let p = preset(p.as_deref())?;
            let cfg = match &config {
                Some(path) => {
                    require_file(path, "config")?;
                    ExperimentConfig::load(path, p).map_err(usage)?
                }
                None => ExperimentConfig::resolve(p, None).map_err(usage)?,
            };
            if dry_run {
                out!("{}", cfg.to_json_pretty()?);
                return Ok(());
            }
            cfg.train.validate().map_err(usage)?;
            let dir = out_dir(out);
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
            for s in seeds {
                let art = run_experiment(&cfg, s, &dir)?;
                let log = &art.outcome.log;
                out!(
                    "seed {s}: {} updates, final return {}, max normalised score {}; wrote {} and {}",
                    log.updates,
                    log.final_return().map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
                    log.max_norm_score().map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into()),
                    art.csv.display(),
                    art.checkpoint.display()
                );
            }
        }
        Command::Eval { checkpoint, seed } => {
            require_file(&checkpoint, "checkpoint")?;
            out!("{}", json(&eval_checkpoint(&checkpoint, seed)?)?);
        }
        Command::Sweep {
            config,
            preset: p,
            out,
            workers,
            dry_run,
        } => {
            let p = preset(p.as_deref())?;
            require_file(&config, "config")?;
            let grid = SweepConfig::load(&config, p).map_err(usage)?;
            let (cells, runs) = grid.expand().map_err(usage)?;
            if dry_run {
                out!("{} runs in {} cells", runs.len(), cells.len());
                return Ok(());
            }
            let table = run_sweep(&grid, workers)?;
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            let path = dir.join("sweep.csv");
            std::fs::write(&path, table.to_csv()?).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let failed: usize = table.cells.iter().map(|c| c.failed).sum();
            out!("{} runs ({failed} failed); wrote {}", table.runs.len(), path.display());
        }
        Command::Probe {
            checkpoint,
            states,
            seed,
        } => {
            require_file(&checkpoint, "checkpoint")?;
            out!("{}", json(&probe_checkpoint(&checkpoint, states, seed)?)?);
        }
        Command::Plot { csv, column, out, name } => {
            for c in &csv {
                require_file(c, "csv")?;
            }
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            let path = dir.join(name);
            let paths: Vec<&Path> = csv.iter().map(PathBuf::as_path).collect();
            let cols = (!column.is_empty()).then_some(column.as_slice());
            emit_plot(&paths, cols, &path)?;
            out!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
