//! `charblend`: train, evaluate, and query portmanteau models.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "charblend",
    about = "Portmanteau generation with character-level neural sequence models",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the models a prediction configuration needs and write
    /// model files under the --model stem.
    Train(TrainArgs),
    /// k-fold cross-validation: train per fold, evaluate test folds,
    /// and write per-fold and summary reports.
    Crossval(CrossvalArgs),
    /// Evaluate trained models on a held-out dataset, with coverage
    /// and uncovered-subset analysis.
    Eval(EvalArgs),
    /// Rank portmanteau candidates for two root words.
    Suggest(SuggestArgs),
    /// Train the character LM on a word list and save it (its
    /// embedding table initializes downstream models).
    #[command(name = "pretrain-embeddings")]
    PretrainEmbeddings(PretrainArgs),
    /// Paired-bootstrap significance test between two systems'
    /// prediction files.
    Significance(SignificanceArgs),
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got {other:?}")),
    }
}

/// Flags shared by every model-running subcommand. Defaults follow the
/// best-performing configuration: backward noisy-channel scoring over
/// exhaustive candidates, with attention, ensembling, and pretrained
/// embedding initialization.
#[derive(Args, Clone)]
struct ModelFlags {
    /// Dot-product attention: on|off
    #[arg(long, default_value = "on", value_parser = parse_on_off, action = clap::ArgAction::Set, value_name = "on|off")]
    attn: bool,
    /// Ensemble size M (1 disables ensembling)
    #[arg(long, default_value_t = 10)]
    ensemble: usize,
    /// Initialize character embeddings from the pretrained LM: on|off
    #[arg(long, default_value = "on", value_parser = parse_on_off, action = clap::ArgAction::Set, value_name = "on|off")]
    init: bool,
    /// Prediction strategy: greedy|beam|score
    #[arg(long, default_value = "score")]
    strategy: String,
    /// Candidate scorer: forward|backward
    #[arg(long, default_value = "backward")]
    scorer: String,
    /// Weight on the language-model term of the noisy-channel score
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Beam width for --strategy beam
    #[arg(long = "beam-width", default_value_t = 5)]
    beam_width: usize,
    /// Master seed; all randomness derives from it
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Character embedding size
    #[arg(long = "d-emb", default_value_t = 50)]
    d_emb: usize,
    /// LSTM hidden size
    #[arg(long = "d-h", default_value_t = 100)]
    d_h: usize,
    /// Maximum training epochs
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Early-stopping patience (consecutive non-improving epochs)
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Adam learning rate
    #[arg(long = "lr", default_value_t = 1e-3)]
    learning_rate: f64,
    /// Global gradient-norm clip
    #[arg(long = "clip", default_value_t = 5.0)]
    clip_norm: f64,
    /// Ensemble subsample fraction
    #[arg(long, default_value_t = 0.8)]
    subsample: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset TSV: `root1<TAB>root2<TAB>portmanteau` per line
    #[arg(long)]
    data: String,
    /// Word list (one word per line) for embedding pretraining and the
    /// noisy-channel LM
    #[arg(long)]
    wordlist: Option<String>,
    /// Output path stem; files are written as `<stem>.<arch>.model`
    #[arg(long)]
    model: String,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    wordlist: Option<String>,
    /// Number of folds
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Output directory for fold reports and the summary
    #[arg(long, default_value = "crossval-out")]
    out: String,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: String,
    /// Model path stem written by `train`
    #[arg(long)]
    model: String,
    /// Output directory for reports
    #[arg(long, default_value = "eval-out")]
    out: String,
    /// Optional aligned baseline predictions (one per line) to include
    /// in the uncovered-subset comparison
    #[arg(long = "baseline-preds")]
    baseline_preds: Option<String>,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct SuggestArgs {
    root1: String,
    root2: String,
    /// Model path stem written by `train`
    #[arg(long)]
    model: String,
    /// How many candidates to print
    #[arg(long = "top-k", default_value_t = 10)]
    top_k: usize,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    wordlist: String,
    /// Output model file path
    #[arg(long)]
    model: String,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct SignificanceArgs {
    /// System A predictions, one per line
    #[arg(long = "preds-a")]
    preds_a: String,
    /// System B predictions, one per line
    #[arg(long = "preds-b")]
    preds_b: String,
    /// Ground truths, one per line
    #[arg(long)]
    truths: String,
    /// Number of resampled subsets
    #[arg(long, default_value_t = 1000)]
    m: usize,
    /// Subset size; defaults to half the dataset
    #[arg(long)]
    n: Option<usize>,
    /// Distance margin for the margin-variant comparison
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output file for the result line
    #[arg(long, default_value = "significance.csv")]
    out: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => commands::cmd_train(args),
        Cmd::Crossval(args) => commands::cmd_crossval(args),
        Cmd::Eval(args) => commands::cmd_eval(args),
        Cmd::Suggest(args) => commands::cmd_suggest(args),
        Cmd::PretrainEmbeddings(args) => commands::cmd_pretrain(args),
        Cmd::Significance(args) => commands::cmd_significance(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 0 success, 1 internal error, 2 usage/input error.
fn exit_code_for(err: &charblend_core::Error) -> u8 {
    use charblend_core::Error;
    match err {
        Error::Io { .. }
        | Error::Config(_)
        | Error::Contract(_)
        | Error::RejectedRecord(_)
        | Error::Encoding { .. }
        | Error::ModelFormat(_) => 2,
        Error::Shape { .. } | Error::Index { .. } | Error::Diverged(_) => 1,
    }
}
