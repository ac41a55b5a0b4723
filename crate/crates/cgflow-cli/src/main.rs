//! Command-line entry points: dataset generation, training, sampling,
//! evaluation, and the self-test battery.
//!
//! Exit codes: 0 success, 1 runtime/model failure, 2 usage or
//! configuration error. Flags containing a dot (`--train.lr 0.01`)
//! override the matching key of the JSON run configuration.

mod commands;
mod config;
mod dot;

use clap::{Parser, Subcommand};

use cgflow::error::CgError;

#[derive(Parser)]
#[command(name = "cgflow", version, about = "Continuous graph flow toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write train/val/test JSONL splits.
    MakeData {
        /// community-small or ego-small.
        #[arg(long)]
        generator: String,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        n_min: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long, default_value = "data")]
        out: String,
    },
    /// Train a model per the JSON run configuration.
    Train {
        #[arg(long)]
        config: String,
        /// Validate the configuration and print the parameter count.
        #[arg(long)]
        dry_run: bool,
        /// Restrict training graphs to LO-HI nodes.
        #[arg(long)]
        train_sizes: Option<String>,
        /// Restrict test-NLL graphs to LO-HI nodes.
        #[arg(long)]
        eval_sizes: Option<String>,
    },
    /// Sample from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: String,
        #[arg(long, default_value_t = 64)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples.jsonl")]
        out: String,
        /// Directory for one DOT file per sample.
        #[arg(long)]
        dot: Option<String>,
        /// JSON file of observed variables for conditional sampling.
        #[arg(long)]
        conditional: Option<String>,
    },
    /// MMD metrics between two graph JSONL files.
    Eval {
        #[arg(long)]
        reference: String,
        #[arg(long)]
        generated: String,
        #[arg(long, default_value = "metrics.json")]
        out: String,
        /// Comma-separated subset of degree,clustering,orbit.
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Ground distance: tv or w1.
        #[arg(long, default_value = "tv")]
        distance: String,
    },
    /// Run the diagnostic battery.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn exit_code(e: &CgError) -> i32 {
    match e {
        CgError::Config(_) | CgError::GraphParse { .. } => 2,
        _ => 1,
    }
}

fn main() {
    let (args, overrides) = config::extract_dotted_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);

    let result = match cli.cmd {
        Cmd::MakeData { generator, count, seed, n_min, n_max, out } => {
            commands::make_data(&generator, count, seed, n_min, n_max, &out)
        }
        Cmd::Train { config, dry_run, train_sizes, eval_sizes } => {
            commands::train_cmd(&config, &overrides, dry_run, train_sizes, eval_sizes)
        }
        Cmd::Sample { checkpoint, num, seed, out, dot, conditional } => {
            commands::sample_cmd(&checkpoint, num, seed, &out, dot, conditional)
        }
        Cmd::Eval { reference, generated, out, metrics, sigma, distance } => {
            commands::eval_cmd(&reference, &generated, &out, metrics, sigma, &distance)
        }
        Cmd::Selftest { seed } => commands::selftest_cmd(seed),
    };

    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
