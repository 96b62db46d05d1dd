use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rcd_core::error::RcdError;
use rcd_core::tasks::{run, Task};

#[derive(Parser, Debug)]
#[command(name = "rcd", version, about = "Referring change detection batch tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the change detector on the configured datasets.
    TrainRcdnet {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a detector checkpoint on `eval.dataset`.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict one change map for an image pair and a prompt.
    Infer {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the synthetic-pair denoiser.
    TrainRcdgen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample synthetic change pairs.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Render a ground-truth/prediction comparison map.
    Render {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse per-class logit files into a semantic label map.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl From<Command> for Task {
    fn from(c: Command) -> Self {
        match c {
            Command::TrainRcdnet { config } => Task::TrainRcdNet { config },
            Command::Eval { config, checkpoint } => Task::Eval { config, checkpoint },
            Command::Infer { pre, post, prompt, checkpoint, out } => Task::Infer { pre, post, prompt, checkpoint, out },
            Command::TrainRcdgen { config } => Task::TrainRcdGen { config },
            Command::Generate { config, count } => Task::Generate { config, count },
            Command::Render { gt, pred, out } => Task::Render { gt, pred, out },
            Command::Aggregate { input, out } => Task::Aggregate { input, out },
        }
    }
}

fn error_kind(e: &RcdError) -> &'static str {
    match e {
        RcdError::Validation(_) => "validation",
        RcdError::Vocabulary(_) => "vocabulary",
        RcdError::Numeric(_) => "numeric",
        RcdError::Degenerate(_) => "degenerate",
        RcdError::Sampling { .. } => "sampling",
        RcdError::Ingestion { .. } => "ingestion",
        RcdError::Checkpoint(_) => "checkpoint",
        RcdError::Config(_) => "config",
        RcdError::Io { .. } => "io",
        RcdError::Image { .. } => "image",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let task = Task::from(cli.command);
    let kind = task.kind();
    match run(&task) {
        Ok(summary) => {
            for a in &summary.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error kind={} task={kind:?} message=\"{e}\"", error_kind(&e));
            ExitCode::from(2)
        }
    }
}
