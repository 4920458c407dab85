//! `agcn`: train, evaluate, verify, benchmark and inspect point-cloud
//! attention networks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "agcn", version, about = "Attention-based graph convolution networks for point clouds")]
struct Cli {
    /// Worker threads for data preparation and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunFlags {
    /// Overrides the seed of the training config.
    #[arg(long)]
    seed: Option<u64>,
    /// Arithmetic precision: 32 or 64 bits.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the train split of a manifest, validating on val.
    Train {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Finite-difference gradient check of the tiny classification and
    /// segmentation networks.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the attention backward pass (negative control).
        #[arg(long, hide = true)]
        sabotage_attention: bool,
    },
    /// Time KNN-restricted against dense attention over node counts.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset and its manifest.
    Synth {
        /// Dataset description file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump sampled nodes, the node graph, attention scores and node
    /// activations of one cloud as CSV.
    Inspect {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired training with and without the global point graph.
    Ablate {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_parser = ["32", "64"])]
        precision: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("AGCN_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train {
            model_config,
            train_config,
            manifest,
            out,
            run,
        } => commands::train(&model_config, train_config.as_deref(), &manifest, &out, &run),
        Command::Eval {
            model_config,
            checkpoint,
            manifest,
            split,
            out,
            run,
        } => commands::eval(&model_config, &checkpoint, &manifest, &split, out.as_deref(), &run),
        Command::Gradcheck {
            seed,
            out,
            sabotage_attention,
        } => commands::gradcheck(seed, out.as_deref(), sabotage_attention),
        Command::Bench {
            out,
            sizes,
            k,
            width,
            batch,
            reps,
            warmups,
            seed,
        } => commands::bench(
            out.as_deref(),
            agcn::experiments::BenchSettings {
                sizes,
                k,
                width,
                batch,
                warmups,
                reps,
                seed,
            },
        ),
        Command::Synth { spec, out, seed } => commands::synth(&spec, &out, seed),
        Command::Inspect {
            model_config,
            checkpoint,
            cloud,
            out,
        } => commands::inspect(&model_config, &checkpoint, &cloud, &out),
        Command::Ablate {
            model_config,
            train_config,
            manifest,
            out,
            seeds,
            precision,
        } => commands::ablate(&model_config, train_config.as_deref(), &manifest, out.as_deref(), &seeds, precision),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
