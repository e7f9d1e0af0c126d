use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use causalmol::cli;

/// Few-shot molecular property prediction with context graphs and causal
/// substructure masking.
#[derive(Parser)]
#[command(name = "causalmol", version)]
struct Args {
    /// Override the config-file seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batched episode evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-motif benchmark (dataset.tsv,
    /// splits.json, groundtruth.jsonl, tasks.json).
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose every dataset molecule into functional-group fragments.
    Fragment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the typed node/edge lists of one episode's context graph.
    BuildContext {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Include label edges for auxiliary (non-target) properties.
        #[arg(long, default_value_t = true)]
        context_aux: bool,
    },
    /// Meta-train on the training tasks (defaults: 3 GIN layers, width 64,
    /// inner lr 0.05, outer lr 0.001, batch of 8 episodes, alpha1 0.1,
    /// alpha2 0.01).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out tasks.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// Planted-motif atom annotations for explanation quality.
        #[arg(long)]
        groundtruth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit per-atom relevance scores for held-out query molecules.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Property-property similarity matrices (Jaccard vs inverse JSD) as CSV.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.threads == 0 {
        let status = serde_json::json!({
            "status": "error", "code": "validation", "message": "threads must be >= 1",
        });
        println!("{status}");
        return ExitCode::from(1);
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global();

    let result = match &args.command {
        Command::GenSynth { config, out } => cli::cmd_gen_synth(config, out, args.seed),
        Command::Fragment { input, out } => cli::cmd_fragment(input, out),
        Command::BuildContext { episode, data, out, context_aux } => {
            cli::cmd_build_context(episode, data, out, *context_aux)
        }
        Command::Train { config, data, splits, out, resume } => {
            cli::cmd_train(config, data, splits, out, resume.as_deref(), args.seed)
        }
        Command::Eval { config, checkpoint, data, splits, groundtruth, out } => cli::cmd_eval(
            config,
            checkpoint,
            data,
            splits,
            groundtruth.as_deref(),
            out,
            args.seed,
        ),
        Command::Explain { config, checkpoint, data, splits, out } => {
            cli::cmd_explain(config, checkpoint, data, splits, out, args.seed)
        }
        Command::Report { config, checkpoint, data, splits, out } => {
            cli::cmd_report(config, checkpoint, data, splits, out, args.seed)
        }
    };

    match result {
        Ok(payload) => {
            let status = serde_json::json!({ "status": "ok", "result": payload });
            println!("{status}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let status = serde_json::json!({
                "status": "error", "code": e.code, "message": e.message,
            });
            println!("{status}");
            ExitCode::from(e.exit)
        }
    }
}
