mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "synrewrite",
    version,
    about = "Synthetic query rewrites, leakage audits, rewriter training and RAG evaluation",
    after_help = "Option values come from flags, then the --config TOML file (top-level keys, \
                  overridden by a [subcommand] table), then SYNREWRITE_<KEY> environment variables."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random choice (model init, sampling, shuffling)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output format of reporting commands
    #[arg(long, global = true, value_parser = ["json", "md", "markdown", "csv"])]
    pub format: Option<String>,
    /// TOML config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest (defaults to <out-dir>/manifest.json
    /// for commands that write a directory)
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More logging (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Annotate records with synthetic rewrites (syn_seen / syn_unseen)
    Synthesize(SynthesizeArgs),
    /// Entity leakage of one or more rewrite variants
    AnalyzeLeakage(LeakageArgs),
    /// Embed a corpus and write a flat inner-product index
    BuildIndex(BuildIndexArgs),
    /// MRR@k of rewrite variants against the index
    EvalRetrieval(EvalArgs),
    /// Generation metrics with the gold document as context
    EvalGeneration(EvalArgs),
    /// Supervised training of the rewriter
    TrainSft(TrainSftArgs),
    /// Sample candidate rewrites and build preference pairs
    BuildPairs(BuildPairsArgs),
    /// Preference training (DPO / APO / APO-zero) from an SFT checkpoint
    TrainPref(TrainPrefArgs),
    /// Rewrite, retrieve and generate; full report with timing
    RunRag(EvalArgs),
    /// Length statistics, cosine similarity of variants, or re-rendering of
    /// saved run-rag reports
    Report(ReportArgs),
    /// Gradient checks and oracle comparisons
    Selftest,
    /// Write the synthetic coreference toy dataset
    MakeToy(MakeToyArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// seen | unseen
    #[arg(long)]
    pub condition: Option<String>,
    /// rules (offline, deterministic) | http (SYNREWRITE_LLM_* variables)
    #[arg(long)]
    pub provider: Option<String>,
    /// Prompt template file; must contain {history}, {query} and, for
    /// `seen`, {document}
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Output records JSONL
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LeakageArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Variants to audit (repeatable or comma-separated)
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Entity JSONL from an external extractor instead of the builtin rules
    #[arg(long)]
    pub entities: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Hashed TF-IDF dimension
    #[arg(long)]
    pub dim: Option<usize>,
    /// Precomputed document vectors (binary) instead of TF-IDF
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// doc_id manifest of --vectors
    #[arg(long)]
    pub vectors_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Index directory from build-index (not used by eval-generation)
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// raw | manual | syn_unseen | syn_seen | model (repeatable)
    #[arg(long = "rewriter")]
    pub rewriters: Vec<String>,
    /// Checkpoint directory for the `model` rewriter
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// extractive | http
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainSftArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Variant used as the training target
    #[arg(long)]
    pub target: Option<String>,
    /// Held-out records for per-epoch exact match
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub vocab_cap: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    /// cosine | linear | constant
    #[arg(long)]
    pub schedule: Option<String>,
    /// Gradient-norm clip; 0 disables
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildPairsArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub w_retrieval: Option<f64>,
    #[arg(long)]
    pub w_generation: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output pairs JSONL
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainPrefArgs {
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// SFT checkpoint (policy start and reference)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Anchor checkpoint for APO / APO-zero (defaults to --model)
    #[arg(long)]
    pub anchor: Option<PathBuf>,
    /// dpo | apo | apo_zero
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Drop pairs whose score margin is below this
    #[arg(long)]
    pub pair_threshold: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    /// Token-length statistics per rewrite variant
    Lengths,
    /// Mean pairwise cosine similarity between variant embeddings (CSV)
    Cosine,
    /// Re-render saved run-rag JSON reports
    Render,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    pub kind: ReportKind,
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Index directory whose embedder is used by `cosine`
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Variants to include (default: all present)
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// run-rag JSON reports for `render`
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub n_entities: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub manual_error_rate: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
