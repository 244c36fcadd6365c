//! `logken` — command-line driver for the log-knowledge pipeline:
//! corpus preparation, knowledge distillation, pre-training, fine-tuning,
//! evaluation, auditing and report aggregation.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod corpus_cmd;
mod distill_cmd;
mod eval_cmd;
mod model_cmd;
mod util;

use util::CliError;

#[derive(Parser)]
#[command(name = "logken", version, about = "Distill LLM expert knowledge about logs into a small bi-encoder and evaluate it on downstream tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus preparation: template extraction, dedup, unstable-log
    /// synthesis, training-set subsampling.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Build the contrastive example set by degrading a confirmed positive.
    Negatives(NegativesArgs),
    /// Distill expert knowledge for every template in a corpus.
    Distill(DistillArgs),
    /// Pre-train the bi-encoder on (template, knowledge) pairs.
    Pretrain(PretrainArgs),
    /// Fine-tune the pre-trained log encoder on a downstream task.
    Finetune(FinetuneArgs),
    /// Score a predictions file against its gold dataset.
    Eval(EvalArgs),
    /// Grade existing knowledge records with the Evaluator role.
    Audit(AuditArgs),
    /// Merge metric CSVs into one JSON summary.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Extract parameter-masked templates from raw logs.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Collapse duplicate templates, merging origin ids.
    Dedupe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Replace a fraction of items with unstable variants.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Keep a random fraction of a train split.
    Subsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Mock,
    Http,
}

#[derive(Args)]
pub struct BackendArgs {
    /// Which chat backend to use.
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendChoice,
    /// Mock transcript file (JSONL {"role_card","turn","response"}).
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Chat-completions endpoint URL for the HTTP backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name to request.
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,
    /// Bound on simultaneously outstanding requests.
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

#[derive(Args)]
pub struct NegativesArgs {
    /// File holding the log template text the examples refer to.
    #[arg(long)]
    pub log_file: PathBuf,
    /// File holding the confirmed positive knowledge.
    #[arg(long)]
    pub positive_file: PathBuf,
    /// File holding the key points (optional).
    #[arg(long)]
    pub keypoints_file: Option<PathBuf>,
    /// Output JSON file for the contrastive example set.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyChoice {
    Mec,
    Cot,
}

#[derive(Args)]
pub struct DistillArgs {
    /// Templates JSONL to distill knowledge for.
    #[arg(long)]
    pub input: PathBuf,
    /// Output knowledge JSONL.
    #[arg(long)]
    pub knowledge_out: PathBuf,
    /// Output trace JSONL (one trace per template, MEC only).
    #[arg(long)]
    pub traces_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mec")]
    pub strategy: StrategyChoice,
    /// Maximum evaluate/refine iterations per template.
    #[arg(long, default_value_t = 3)]
    pub max_epochs: usize,
    /// Directory with director.txt / executor.txt / evaluator.txt cards.
    #[arg(long)]
    pub roles_dir: Option<PathBuf>,
    /// Contrastive example set JSON (defaults to the built-in set).
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Worker threads distilling distinct templates concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Resume from the cursor file, skipping completed templates.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Knowledge JSONL corpus.
    #[arg(long)]
    pub knowledge: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub output: PathBuf,
    /// Loss history CSV (step,tp,sa,joint).
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// TOML config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskChoice {
    /// Anomaly detection: single-label; precision/recall/F1 on the anomaly class.
    Ad,
    /// Failure identification: single-label; Recall@K over the label ranking.
    Fi,
    /// Module classification: single-label; accuracy and weighted F1.
    Mc,
    /// Fault phenomenon identification: multi-label; average accuracy.
    Fpi,
    /// Log/description semantic matching: pair; accuracy and weighted F1.
    Ldsm,
    /// Log/possible-cause ranking: Precision@K and MRR.
    Lpcr,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub task: TaskChoice,
    /// Train split dataset JSONL.
    #[arg(long)]
    pub train: PathBuf,
    /// Eval split dataset JSONL.
    #[arg(long)]
    pub eval: PathBuf,
    /// Pre-trained checkpoint (from `logken pretrain`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Predictions JSONL output.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Save the fine-tuned backbone + head here.
    #[arg(long)]
    pub save_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multi-label decision threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MultiLabelMode {
    Jaccard,
    GoldFraction,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: TaskChoice,
    /// Gold dataset JSONL (the eval split used for prediction).
    #[arg(long)]
    pub gold: PathBuf,
    /// Predictions JSONL from `logken finetune`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Report CSV output (metric,name,value).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Report JSON output.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Dataset name recorded in the report.
    #[arg(long, default_value = "dataset")]
    pub name: String,
    /// K for Recall@K / Precision@K.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Label counted as the positive (anomaly) class.
    #[arg(long, default_value = "true")]
    pub positive_label: String,
    /// Per-sample multi-label accuracy convention.
    #[arg(long, value_enum, default_value = "jaccard")]
    pub multilabel_mode: MultiLabelMode,
}

#[derive(Args)]
pub struct AuditArgs {
    /// Knowledge JSONL to grade.
    #[arg(long)]
    pub knowledge: PathBuf,
    /// Verdicts JSONL output.
    #[arg(long)]
    pub output: PathBuf,
    /// Directory with role cards (evaluator.txt is used).
    #[arg(long)]
    pub roles_dir: Option<PathBuf>,
    /// Contrastive example set JSON (defaults to the built-in set).
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Metric CSV files to merge.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// JSON summary output.
    #[arg(long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus { action } => match action {
            CorpusAction::Parse { input, output } => corpus_cmd::parse(&input, &output),
            CorpusAction::Dedupe { input, output } => corpus_cmd::dedupe(&input, &output),
            CorpusAction::Perturb {
                input,
                output,
                ratio,
                seed,
            } => corpus_cmd::perturb(&input, &output, ratio, seed),
            CorpusAction::Subsample {
                input,
                output,
                ratio,
                seed,
            } => corpus_cmd::subsample(&input, &output, ratio, seed),
        },
        Command::Negatives(args) => distill_cmd::negatives(args),
        Command::Distill(args) => distill_cmd::distill(args),
        Command::Pretrain(args) => model_cmd::pretrain(args),
        Command::Finetune(args) => model_cmd::finetune(args),
        Command::Eval(args) => eval_cmd::eval(args),
        Command::Audit(args) => eval_cmd::audit(args),
        Command::Report(args) => eval_cmd::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
    }
}
