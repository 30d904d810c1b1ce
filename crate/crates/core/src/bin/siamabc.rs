use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use siamabc::adaptation::AdaptMode;
use siamabc::cli::{exit_code, run, Command, EXIT_USAGE};
use siamabc::config::{AppConfig, Overrides};

#[derive(Parser)]
#[command(name = "siamabc", version, about = "Train, run and evaluate the SiamABC tracker")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Test-time normalization mode.
    #[arg(long, global = true, value_name = "MODE", value_parser = ["off", "dtta", "momentum", "dua", "adabn"])]
    dtta: Option<String>,
    /// Weight of the instance statistics in the adapted blend.
    #[arg(long = "lambda-bn", global = true)]
    lambda_bn: Option<f64>,
    /// Minimum frames between dynamic template updates.
    #[arg(long = "update-N", global = true)]
    update_n: Option<usize>,
    /// Rate of the running score average.
    #[arg(long = "lambda-d", global = true)]
    lambda_d: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sequences processed concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a dataset directory and write a checkpoint.
    Train,
    /// Track every sequence of a dataset and write result files.
    Track,
    /// Track (or read stored results) and write a metrics report.
    Eval {
        /// Directory of `<sequence>.txt` result files to score.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Score a ground-truth replay.
        #[arg(long)]
        oracle: bool,
    },
    /// Time the filtration blocks and a full tracking step.
    Bench,
    /// Generate a synthetic dataset.
    Synth,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = cli.common;
    let overrides = Overrides {
        dtta: c
            .dtta
            .as_deref()
            .map(|m| m.parse::<AdaptMode>().expect("validated by clap")),
        lambda_bn: c.lambda_bn,
        update_n: c.update_n,
        lambda_d: c.lambda_d,
        seed: c.seed,
        checkpoint: c.checkpoint,
        dataset: c.dataset,
        out: c.out,
        jobs: c.jobs,
    };
    let mut config = match &c.config {
        Some(p) => match AppConfig::load(p) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_USAGE as u8);
            }
        },
        None => AppConfig::default(),
    };
    config.apply(&overrides);
    let command = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Track => Command::Track,
        Cmd::Eval { results, oracle } => Command::Eval { results, oracle },
        Cmd::Bench => Command::Bench,
        Cmd::Synth => Command::Synth,
    };
    match run(&command, &config) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
