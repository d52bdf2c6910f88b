use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gridhvac::experiment::{self, ExperimentConfig, Layout, Stage};
use gridhvac::Result;

#[derive(Parser, Debug)]
#[command(name = "gridhvac", version, about = "Grid-interactive HVAC control lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root for every artifact.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads for training and evaluation.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Es,
    Ppo,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize training and test operation data.
    GenData(Common),
    /// Identify the zone models from the training data.
    FitRom(Common),
    /// Train the policy.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured controllers on the test days.
    Evaluate(Common),
    /// Render SVG plots from curves and evaluation artifacts.
    Report(Common),
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::GenData(c) | Command::FitRom(c) | Command::Evaluate(c) | Command::Report(c) => c,
        Command::Train { common, .. } => common,
    };
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.resolve(common.seed, common.workers)?;
    let layout = Layout::new(&common.out, &cfg.paths);
    match cli.command {
        Command::GenData(_) => print_json(&experiment::gen_data(&cfg, &layout)?),
        Command::FitRom(_) => print_json(&experiment::fit_rom(&cfg, &layout)?),
        Command::Train { stage, .. } => {
            let stage = match stage {
                StageArg::Es => Stage::Es,
                StageArg::Ppo => Stage::Ppo,
                StageArg::Both => Stage::Both,
            };
            print_json(&experiment::train(&cfg, &layout, stage)?)
        }
        Command::Evaluate(_) => print_json(&experiment::evaluate(&cfg, &layout)?.summary),
        Command::Report(_) => print_json(&experiment::report(&cfg, &layout)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
