//! `biolm`: corpus preparation, BPE, pretraining, fine-tuning, generation,
//! evaluation and ablation from the command line.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. Setting `BIOLM_DETERMINISTIC=1` pins all work to a
//! single thread.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "biolm",
    version,
    about = "Generative language model toolkit for biomedical text mining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Learn BPE merges and a vocabulary.
    LearnBpe(LearnBpeArgs),
    /// Pretrain a language model on a document corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on a task dataset with a prompt.
    Finetune(FinetuneArgs),
    /// Generate a continuation of a text prefix.
    Generate(GenerateArgs),
    /// Evaluate a fine-tuned checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Fine-tune and evaluate every target format × prompt cell.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` settings; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for every output file.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// re, qa or doc.
    #[arg(long)]
    pub task: Option<String>,
    /// JSONL file whose records carry a `split` field.
    #[arg(long, conflicts_with_all = ["train", "valid", "test"])]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Relation lexicon JSON (relation extraction only).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// svo, is-of, rel-is, rel-exists or structured.
    #[arg(long)]
    pub target_format: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tokens_per_batch: Option<usize>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long)]
    pub average_last: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// Beam width; 1 decodes greedily.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub documents: Option<usize>,
}

#[derive(Args, Debug)]
pub struct LearnBpeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Document corpus JSONL.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Hard prompt texts to cover; repeatable.
    #[arg(long)]
    pub hard_prompt: Vec<String>,
    #[arg(long)]
    pub merges: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory holding merges.txt and vocab.txt.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// desk or paper.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub ffn_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// `cont:<length>` or `hard:<text>`.
    #[arg(long)]
    pub prompt: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub prefix_text: Option<String>,
    /// `cont:<length>`, `hard:<text>` or `none`.
    #[arg(long)]
    pub prompt: Option<String>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// train, valid or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretrained checkpoint every cell starts from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated target formats.
    #[arg(long)]
    pub formats: Option<String>,
    /// Semicolon-separated prompts, e.g. `cont:9;hard:in conclusion,`.
    #[arg(long)]
    pub prompts: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
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
    if commands::deterministic() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::LearnBpe(a) => commands::learn_bpe(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
