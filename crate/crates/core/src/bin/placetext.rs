use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use placetext::ablation::Axis;
use placetext::cli::{run, Command, Overrides, RunConfig, Settings};
use placetext::retrieval::AlignMode;

/// Text-to-multi-view-image place recognition on token embeddings.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation, splitting, training and query shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset with split labels.
    Gen,
    /// Train the text and image heads.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the image-view order that best matches a text group.
    Align {
        /// JSON array of text descriptors, one per view.
        #[arg(long)]
        text: PathBuf,
        /// JSON array of image descriptors, one per view.
        #[arg(long)]
        image: PathBuf,
    },
    /// Write a recall table for one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Sweep one ablation axis and write a comparison table.
    Ablate {
        /// training-strategy, text-head, aggregation, temperature,
        /// ccca-variant, truncation or views
        axis: Axis,
        #[arg(long)]
        data: PathBuf,
        /// Trained model for the evaluation-only axes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
    },
}

#[derive(Args, Default)]
struct EvalFlags {
    /// ccca, oracle or none
    #[arg(long)]
    align_mode: Option<AlignMode>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    truncate: Option<f64>,
    /// Comma-separated k values, e.g. 1,5,10
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Comma-separated thresholds in meters, e.g. 5,10,15
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    /// Align against every candidate instead of the unaligned top-1.
    #[arg(long)]
    per_candidate: bool,
}

fn build(cli: Cli) -> Result<RunConfig> {
    let settings = match &cli.config {
        Some(p) => Settings::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Settings::default(),
    };
    let (command, flags) = match cli.command {
        Cmd::Gen => (Command::Gen, EvalFlags::default()),
        Cmd::Train { data } => (Command::Train { data }, EvalFlags::default()),
        Cmd::Align { text, image } => (Command::Align { text, image }, EvalFlags::default()),
        Cmd::Eval {
            data,
            checkpoint,
            eval,
        } => (Command::Eval { data, checkpoint }, eval),
        Cmd::Ablate {
            axis,
            data,
            checkpoint,
            eval,
        } => (
            Command::Ablate {
                axis,
                data,
                checkpoint,
            },
            eval,
        ),
    };
    let overrides = Overrides {
        seed: cli.seed,
        align_mode: flags.align_mode,
        views: flags.views,
        truncate: flags.truncate,
        ks: flags.k,
        eps_m: flags.eps,
        per_candidate: flags.per_candidate,
    };
    Ok(RunConfig {
        command,
        settings: overrides.apply(settings),
        out: cli.out,
    })
}

fn main() -> ExitCode {
    let result = build(Cli::parse()).and_then(|config| {
        let name = config.command.name();
        run(&config, &mut |line| eprintln!("{line}")).with_context(|| format!("{name} failed"))
    });
    match result {
        Ok(outcome) => {
            if !outcome.summary.is_empty() {
                println!("{}", outcome.summary);
            }
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
