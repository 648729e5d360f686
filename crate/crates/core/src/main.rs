use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use psmsel::config::RunConfig;
use psmsel::pipeline::{self, Run};
use psmsel::Error;

#[derive(Parser)]
#[command(version, about = "Context-aware pseudo-label selection over a synthetic 3D detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled, unlabeled, held-out and validation splits.
    Gen(Common),
    /// Train the PSM and proxy student on the labeled split.
    Burnin(Common),
    /// Run the semi-supervised loop.
    Ssl {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest state checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this epoch.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Rebuild metrics.csv and analyze the latest PSM on held-out scenes.
    Eval(Common),
    /// Emit SVG and CSV figures into <run-dir>/report.
    Report(Common),
}

/// The config from `--config` with overrides applied, if one was given.
fn load_config(c: &Common) -> psmsel::Result<Option<RunConfig>> {
    let Some(path) = &c.config else { return Ok(None) };
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = &c.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(Some(cfg))
}

fn run_dir(c: &Common, cfg: Option<&RunConfig>) -> psmsel::Result<PathBuf> {
    c.run_dir
        .clone()
        .or_else(|| cfg.map(|c| c.run_dir.clone()))
        .ok_or_else(|| Error::InvalidInput("either --config or --run-dir is required".into()))
}

fn open(c: &Common) -> psmsel::Result<Run> {
    let cfg = load_config(c)?;
    let dir = run_dir(c, cfg.as_ref())?;
    if cfg.is_none() && c.seed.is_some() {
        let run = Run::open(&dir, None)?;
        let mut expected = run.config.clone();
        expected.seed = c.seed.unwrap_or(expected.seed);
        return Run::open(&dir, Some(&expected));
    }
    Run::open(&dir, cfg.as_ref())
}

fn execute(cmd: Command) -> psmsel::Result<()> {
    match cmd {
        Command::Gen(c) => {
            let mut cfg = load_config(&c)?.ok_or_else(|| Error::InvalidInput("gen requires --config".into()))?;
            cfg.run_dir = run_dir(&c, Some(&cfg))?;
            pipeline::cmd_gen(&cfg)?;
        }
        Command::Burnin(c) => {
            pipeline::cmd_burnin(&open(&c)?)?;
        }
        Command::Ssl {
            common,
            resume,
            stop_after,
        } => {
            pipeline::cmd_ssl(&open(&common)?, resume, stop_after)?;
        }
        Command::Eval(c) => {
            pipeline::cmd_eval(&open(&c)?)?;
        }
        Command::Report(c) => {
            let cfg = load_config(&c)?;
            let dir = run_dir(&c, cfg.as_ref())?;
            if cfg.is_some() && Path::new(&dir).join("config.json").exists() {
                Run::open(&dir, cfg.as_ref())?;
            }
            pipeline::cmd_report(&dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not usage errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            match e {
                Error::Invariant(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
