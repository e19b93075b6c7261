use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "mood", version, about = "Complexity-routed multi-exit OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct WorkerArgs {
    /// Worker threads; outputs are identical for any value.
    #[arg(long)]
    workers: Option<usize>,
}

impl WorkerArgs {
    fn resolve(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate energy means, complexity maximum and threshold on ID data.
    Calibrate {
        #[arg(long)]
        id_logits: PathBuf,
        #[arg(long)]
        id_images: PathBuf,
        #[arg(long, default_value = "png")]
        codec: String,
        #[arg(long, default_value = "adjusted-energy")]
        score: String,
        /// ODIN temperature.
        #[arg(long, default_value_t = 1000.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.95)]
        tpr: f64,
        /// Profile JSON to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Run the built-in MOODNET1 network over images and write logits.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Logits JSON-lines file to write.
        #[arg(long)]
        out: PathBuf,
        /// Cost model file to write; defaults to `<out>.costs.json`.
        #[arg(long)]
        costs: Option<PathBuf>,
        #[arg(long, default_value = "moodnet")]
        model_tag: String,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Print the complexity of every image.
    Complexity {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "png")]
        codec: String,
        /// Adds normalized complexity and routed exit columns.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Print a text histogram of bit lengths with this many bins.
        #[arg(long)]
        histogram: Option<usize>,
    },
    /// Detect a single sample. Exits 0 for in-distribution, 2 for OOD.
    Detect {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        costs: Option<PathBuf>,
        /// Logits file holding the sample.
        #[arg(long)]
        logits: PathBuf,
        /// PNG file, PNG directory or MOODIMG1 container holding the image.
        #[arg(long)]
        image: PathBuf,
        /// Sample id; defaults to the first record.
        #[arg(long)]
        sample: Option<String>,
    },
    /// Evaluate an exit strategy on ID data against one or more OOD sets.
    Eval {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        costs: Option<PathBuf>,
        #[arg(long)]
        id_logits: PathBuf,
        #[arg(long)]
        id_images: Option<PathBuf>,
        #[arg(long, required = true)]
        ood_logits: Vec<PathBuf>,
        #[arg(long)]
        ood_images: Vec<PathBuf>,
        /// `mood`, `greedy`, `random:<seed>` or `constant:<exit>`.
        #[arg(long, default_value = "mood")]
        strategy: String,
        /// Overrides the seed of a `random` strategy.
        #[arg(long)]
        seed: Option<u64>,
        /// ID accuracy denominator: `all` or `accepted`.
        #[arg(long, default_value = "all")]
        accuracy: String,
        /// Output directory for reports and per-sample outcomes.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerArgs,
    },
    /// Render saved report JSON files as one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
