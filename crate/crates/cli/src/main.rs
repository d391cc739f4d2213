//! `egcn`: dataset statistics, graph construction, training, evaluation,
//! ensembling and ablations for the Entity-GCN engine.

mod commands;
mod failure;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use entity_gcn::synthetic::SyntheticConfig;

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "egcn", version, about = "Entity-GCN multi-document question answering")]
struct Cli {
    /// Worker threads for per-sample parallelism (default: available cores).
    #[arg(long, env = "EGCN_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Candidate, document and token statistics of a dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        /// Also write the statistics as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build entity graphs and write per-sample dumps plus a report CSV.
    BuildGraphs {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        graph: GraphArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its best checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        training: TrainArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write report, per-relation and correlation files.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Product-rule ensemble of several checkpoints.
    Ensemble {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        training: TrainArgs,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Ablation CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace candidate and subject mentions with per-sample placeholders.
    Mask {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Masked dataset path; the mask table goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic two-hop task.
    Synth {
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add a distractor chain that mimics the answer path.
        #[arg(long)]
        decoy: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that two splits share no sample ids.
    SplitCheck {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dev: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct GraphArgs {
    /// Coreference chains keyed by sample id.
    #[arg(long)]
    chains: Option<PathBuf>,
    /// Masked data: coreference chains are ignored.
    #[arg(long)]
    masked: bool,
}

#[derive(Args, Debug, Clone)]
struct EmbedArgs {
    /// Binary embedding file.
    #[arg(long, conflicts_with_all = ["static_vectors", "hash_dim"])]
    embeddings: Option<PathBuf>,
    /// Whitespace-separated static word vectors.
    #[arg(long = "static", conflicts_with = "hash_dim")]
    static_vectors: Option<PathBuf>,
    /// Hash embeddings of this width (the default when no file is given).
    #[arg(long)]
    hash_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Training split.
    #[arg(long)]
    dataset: PathBuf,
    /// Validation split used for early stopping.
    #[arg(long)]
    dev: PathBuf,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    graph: GraphArgs,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Number of R-GCN hops.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Shrink every width to this size.
    #[arg(long)]
    node_dim: Option<usize>,
    /// Variant name or label; `ablate` accepts it repeatedly, `train` once.
    #[arg(long = "ablate")]
    variants: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Stats { dataset, out } => commands::stats(&dataset, out.as_deref()),
        Command::BuildGraphs { dataset, graph, out } => commands::build_graphs(&dataset, &graph, &out),
        Command::Train {
            data,
            model,
            training,
            out,
        } => commands::train(&data, &model, &training, &out),
        Command::Eval {
            dataset,
            embed,
            graph,
            checkpoint,
            out,
        } => commands::eval(&dataset, &embed, &graph, &[checkpoint], &out),
        Command::Ensemble {
            dataset,
            embed,
            graph,
            checkpoints,
            out,
        } => commands::eval(&dataset, &embed, &graph, &checkpoints, &out),
        Command::Ablate {
            data,
            model,
            training,
            runs,
            out,
        } => commands::ablate(&data, &model, &training, runs, &out),
        Command::Mask { dataset, seed, out } => commands::mask(&dataset, seed, &out),
        Command::Synth {
            samples,
            seed,
            decoy,
            out,
        } => commands::synth(
            SyntheticConfig {
                samples,
                seed,
                decoy_chain: decoy,
                ..SyntheticConfig::default()
            },
            &out,
        ),
        Command::SplitCheck { dataset, dev } => commands::split_check(&dataset, &dev),
    }
}
