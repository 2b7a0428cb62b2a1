use clap::{Parser, Subcommand};
use opendet::cli;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "opendet",
    about = "Multi-view 3D detection on synthetic scenes: generate data, train, evaluate, compare position embeddings"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint, manifest, and report into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset's held-out scenes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all three position-embedding variants on identical data.
    ComparePe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump final-layer cross-attention weights for one scene.
    DumpAttn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a bar chart from a report CSV.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "translation_error")]
        metric: String,
        #[arg(long, default_value = ">0")]
        bucket: String,
    },
}

fn run(args: Args) -> Result<(), cli::CliError> {
    match args.command {
        Command::Gen { config, out, seed } => cli::cmd_gen(&config, &out, seed, args.quiet),
        Command::Train {
            config,
            dataset,
            out,
            seed,
        } => cli::cmd_train(&config, &dataset, &out, seed, args.quiet).map(|_| ()),
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
        } => cli::cmd_eval(&config, &checkpoint, &dataset, &out, args.quiet).map(|_| ()),
        Command::ComparePe {
            config,
            dataset,
            out,
        } => cli::cmd_compare_pe(&config, &dataset, &out, args.quiet).map(|_| ()),
        Command::DumpAttn {
            config,
            checkpoint,
            dataset,
            scene,
            out,
        } => cli::cmd_dump_attention(&config, &checkpoint, &dataset, scene, &out, args.quiet),
        Command::Plot {
            report,
            out,
            metric,
            bucket,
        } => cli::cmd_plot(&report, &out, &metric, &bucket),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one machine-readable line on failure
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
