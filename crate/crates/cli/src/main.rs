use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inaad_cli::{cmd_eval, cmd_score, cmd_synth, cmd_train, exit_code, RunConfig, ScoreOptions, TrainOptions};

#[derive(Parser)]
#[command(name = "inaad", version, about = "Inpainting-based anomaly detection with diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Model checkpoint (score: model to use; train: resume from it).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Dataset manifest CSV.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for scoring.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Sequential processing and reproducible output files.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Also produce the ablation grid.
    #[arg(long, global = true)]
    ablate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic phantom dataset.
    Synth,
    /// Train a denoiser on the manifest's training split.
    Train,
    /// Score manifest images with a trained checkpoint.
    Score,
    /// Compute metric tables from a scores CSV.
    Eval {
        /// scores.csv, or ablation_scores.csv with --ablate.
        scores: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<PathBuf> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth => cmd_synth(&config, cli.out.as_deref()),
        Command::Train => cmd_train(
            &config,
            &TrainOptions {
                manifest: cli.manifest,
                out: cli.out,
                resume: cli.checkpoint,
                deterministic: cli.deterministic,
            },
        ),
        Command::Score => cmd_score(
            &config,
            &ScoreOptions {
                checkpoint: cli.checkpoint,
                manifest: cli.manifest,
                out: cli.out,
                jobs: cli.jobs,
                deterministic: cli.deterministic,
                ablate: cli.ablate,
            },
        ),
        Command::Eval { scores } => {
            let out = cli
                .out
                .or_else(|| config.out.clone())
                .unwrap_or_else(|| scores.parent().map(PathBuf::from).unwrap_or_default());
            cmd_eval(&scores, &out, cli.ablate)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
