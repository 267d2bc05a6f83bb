//! `genderdist`: generate a skewed corpus, pretrain the toy model, measure
//! its gender-profession bias, fine-tune it toward a target distribution
//! and summarize the results.

mod commands;
mod config;
mod exit;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use exit::Failure;

#[derive(Parser)]
#[command(name = "genderdist", version, about)]
struct Cli {
    /// JSON run configuration (flat keys such as `train.beta`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one config key; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Root for corpus, checkpoint and report directories not set in the
    /// config.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic pretraining and held-out corpora.
    GenCorpus,
    /// Train the toy model on the generated corpus.
    Pretrain,
    /// Measure bias on the test split and write a report.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report file stem.
        #[arg(long, default_value = "base")]
        name: String,
    },
    /// Fine-tune once per configured seed and summarize against the base
    /// report.
    Mitigate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        base_report: Option<PathBuf>,
    },
    /// Run the beta x gamma x batch-size grid and select a configuration.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        base_report: Option<PathBuf>,
    },
    /// Merge reports (base first) into a summary table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// History CSVs to turn into validation-curve CSVs.
        #[arg(long)]
        history: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?.with_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenCorpus => commands::gen_corpus(&cfg, out),
        Command::Pretrain => commands::pretrain_cmd(&cfg, out),
        Command::Detect { checkpoint, name } => commands::detect(&cfg, out, checkpoint.as_deref(), name),
        Command::Mitigate { checkpoint, base_report } => {
            commands::mitigate(&cfg, out, checkpoint.as_deref(), base_report.as_deref())
        }
        Command::Sweep { checkpoint, base_report } => {
            commands::sweep_cmd(&cfg, out, checkpoint.as_deref(), base_report.as_deref())
        }
        Command::Report { reports, history } => commands::report(&cfg, out, reports, history),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
