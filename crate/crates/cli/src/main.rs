use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dualinc_cli::commands::{self, Freshness};
use dualinc_cli::config::{ExperimentConfig, OUT_ENV};
use dualinc_cli::{exit_code, report};

#[derive(Parser)]
#[command(
    name = "dualinc",
    version,
    about = "Continual instruction tuning with dual increments"
)]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the file and the environment.
    #[arg(long, global = true, env = OUT_ENV)]
    out_root: Option<PathBuf>,
    /// Seed for the current step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration override, `section.key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task stream.
    GenData,
    /// Pretrain the frozen base model.
    Pretrain {
        /// Retrain even when an identical checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Run the method × order × seed grid.
    Run,
    /// Tabulate finished runs.
    Report {
        /// Recompute metrics from the accuracy matrices and fail on mismatch.
        #[arg(long)]
        verify: bool,
        /// Directory for report files (default: the runs directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories (default: every run under the runs directory).
        dirs: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = cli.set.clone();
    if let Some(root) = &cli.out_root {
        overrides.push(format!("out_root={:?}", root.display().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(match cli.command {
            Command::GenData => format!("data.seed={seed}"),
            Command::Pretrain { .. } => format!("pretrain.seed={seed}"),
            Command::Run | Command::Report { .. } => format!("grid.seeds=[{seed}]"),
        });
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

fn show(f: Freshness) {
    match f {
        Freshness::UpToDate(p) => println!("up-to-date: {}", p.display()),
        Freshness::Written(p) => println!("wrote {}", p.display()),
    }
}

fn execute(cli: &Cli) -> anyhow::Result<u8> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData => {
            cfg.persist()?;
            show(commands::gen_data(&cfg)?);
        }
        Command::Pretrain { force } => {
            cfg.persist()?;
            show(commands::pretrain(&cfg, *force)?);
        }
        Command::Run => {
            cfg.persist()?;
            let grid = commands::run_grid(&cfg)?;
            println!(
                "{} runs finished, {} failed; summary in {}",
                grid.results.len(),
                grid.failures.len(),
                cfg.runs_dir().join(commands::SUMMARY_FILE).display()
            );
            if !grid.failures.is_empty() {
                return Ok(3);
            }
        }
        Command::Report { verify, out, dirs } => {
            let dirs = if dirs.is_empty() {
                report::discover(&cfg.runs_dir())?
            } else {
                dirs.clone()
            };
            let out = out.clone().unwrap_or_else(|| cfg.runs_dir());
            let rep = report::report(&dirs, &out, *verify)?;
            println!(
                "{} tables, {} absent; wrote {}",
                rep.tables.len(),
                rep.absent.len(),
                out.join(report::REPORT_MD).display()
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
