use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mrilab::par;
use mrilab_cli::config::{ExperimentConfig, Method, Training};
use mrilab_cli::error::{CliError, Context, EXIT_OK};
use mrilab_cli::pipeline::{self, Report, Stage};
use mrilab_cli::quicklook::quicklook;

#[derive(Parser, Debug)]
#[command(name = "mrilab", version, about = "GSURE denoising and DPS/MoDL reconstruction sweeps on synthetic multi-coil MRI")]
struct Cli {
    /// key=value experiment config with [sections]; defaults apply without one
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides run.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core (overrides run.workers)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides run.out_dir)
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Denoiser,
    Edm,
    Modl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom dataset and its degraded SNR levels
    GenData,
    /// Train the stage-1 denoisers or a stage-2 model
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Training targets for edm/modl: naive or gsure
        #[arg(long, default_value = "gsure")]
        mode: String,
    },
    /// Reconstruct the validation split with one method (or `all` configured)
    Reconstruct {
        #[arg(long)]
        method: String,
    },
    /// Metrics, paired tests, summary tables and curves
    Evaluate,
    /// Write a PGM preview of a CXT tensor
    Quicklook {
        path: PathBuf,
        /// Show |x − reference| at 2.5x brightness instead
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).ctx(format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_override("run.seed", &s.to_string()).ctx("--seed")?;
    }
    if let Some(w) = cli.workers {
        cfg = cfg.with_override("run.workers", &w.to_string()).ctx("--workers")?;
    }
    if let Some(o) = &cli.out {
        cfg = cfg.with_override("run.out_dir", &o.display().to_string()).ctx("--out")?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Report, CliError> {
    if let Command::Quicklook { path, reference, output } = &cli.command {
        let dest = quicklook(path, reference.as_deref(), output.as_deref()).ctx("quicklook")?;
        return Ok(Report { notices: vec![format!("wrote {}", dest.display())], artifacts: vec![dest], ..Report::default() });
    }
    let cfg = load_config(cli)?;
    let workers = cfg.workers;
    par::with_workers(workers, || match &cli.command {
        Command::GenData => pipeline::cmd_gen_data(&cfg),
        Command::Train { stage, mode } => {
            let stage = match stage {
                StageArg::Denoiser => Stage::Denoiser,
                StageArg::Edm => Stage::Edm(mode.parse::<Training>().ctx("--mode")?),
                StageArg::Modl => Stage::Modl(mode.parse::<Training>().ctx("--mode")?),
            };
            pipeline::cmd_train(&cfg, stage)
        }
        Command::Reconstruct { method } => {
            let methods = if method == "all" { cfg.methods.clone() } else { vec![method.parse::<Method>().ctx("--method")?] };
            let mut report = Report::default();
            for m in methods {
                let r = pipeline::cmd_reconstruct(&cfg, m)?;
                report.notices.extend(r.notices);
                report.artifacts.extend(r.artifacts);
            }
            Ok(report)
        }
        Command::Evaluate => {
            let ev = pipeline::cmd_evaluate(&cfg)?;
            let mut report = ev.report;
            let table = std::fs::read_to_string(pipeline::Layout::new(&cfg.out_dir).eval_dir().join("summary.txt")).unwrap_or_default();
            report.notices.push(table);
            Ok(report)
        }
        Command::Quicklook { .. } => unreachable!("handled above"),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            for n in &report.notices {
                println!("{n}");
            }
            ExitCode::from(EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
