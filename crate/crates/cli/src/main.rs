use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saewb::commands::{self, EvalArgs};
use saewb::config::ExperimentConfig;
use saewb::error::CliError;
use saewb::presets;

#[derive(Parser)]
#[command(name = "saewb", version, about = "Sparse autoencoder training and evaluation workbench")]
struct Cli {
    /// Experiment config in `key = value` form; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy language model and write its checkpoint.
    TrainLm,
    /// Cache hook-layer activations for the MSE phase.
    Harvest,
    /// Run the configured training regime.
    Run,
    /// Evaluate an SAE (optionally with an adapter) on the validation split.
    Eval {
        #[arg(long)]
        sae: PathBuf,
        /// Skip adapter or LM LoRA checkpoint.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        tokens: Option<u64>,
        #[arg(long)]
        train_split: bool,
    },
    /// Align eval curves of several runs and plot CE gap vs tokens.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Cosine-similarity percentiles between SAE checkpoints.
    Stability {
        #[arg(long, requires = "after", conflicts_with = "series")]
        before: Option<PathBuf>,
        #[arg(long)]
        after: Option<PathBuf>,
        /// Reference checkpoint followed by later ones.
        #[arg(long, num_args = 2..)]
        series: Vec<PathBuf>,
    },
    /// Write the configs of a named experiment set.
    Preset { name: String },
    /// Write a seeded synthetic text corpus.
    SynthCorpus {
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(cli.seed, cli.out.clone()))
}

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    Ok(match &cli.out {
        Some(o) => o.clone(),
        None => load_config(cli)?.out,
    })
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let ow = cli.overwrite;
    match &cli.command {
        Command::TrainLm => {
            let o = commands::cmd_train_lm(&load_config(cli)?, ow)?;
            println!("validation CE {:.5} nats/token", o.validation_ce);
        }
        Command::Harvest => {
            let s = commands::cmd_harvest(&load_config(cli)?, ow)?;
            println!("harvested {} rows", s.rows());
        }
        Command::Run => {
            let o = commands::cmd_run(&load_config(cli)?, ow)?;
            println!("{}", serde_json::to_string_pretty(&o.final_report).expect("report serializes"));
        }
        Command::Eval {
            sae,
            adapter,
            tokens,
            train_split,
        } => {
            let args = EvalArgs {
                sae: sae.clone(),
                adapter: adapter.clone(),
                tokens: *tokens,
                train_split: *train_split,
            };
            commands::cmd_eval(&load_config(cli)?, &args, ow)?;
        }
        Command::Compare { runs } => {
            let c = commands::cmd_compare(runs, &out_dir(cli)?, ow)?;
            print!("{}", c.final_csv);
        }
        Command::Stability { before, after, series } => {
            let list = match (before, after) {
                (Some(b), Some(a)) => vec![b.clone(), a.clone()],
                _ => series.clone(),
            };
            commands::cmd_stability(&list, &out_dir(cli)?, ow)?;
        }
        Command::Preset { name } => {
            let cfg = load_config(cli)?;
            let dir = cfg.out.clone();
            for p in presets::write_preset(name, &cfg, &dir, ow)? {
                println!("{}", p.display());
            }
        }
        Command::SynthCorpus { path, bytes } => {
            commands::write_synthetic_corpus(path, cli.seed.unwrap_or(0), *bytes, ow)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
