//! Command-line driver: data generation, training phases, translation,
//! evaluation and representation analysis, each writing into its own run
//! directory.

pub mod config;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use modnmt_core::NmtError;
use thiserror::Error;

pub use config::RunConfig;

/// Environment variable naming the default parent of run directories.
pub const RUN_ROOT_ENV: &str = "MODNMT_RUN_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] NmtError),
}

#[derive(Debug, Parser)]
#[command(name = "modnmt", version, about = "Modular multilingual NMT with per-language encoders and decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate multi-way aligned cipher-language corpora.
    GenData(GenDataArgs),
    /// Learn a BPE vocabulary from one language's training text.
    BuildVocab(BuildVocabArgs),
    /// Jointly train encoders and decoders for a language pair.
    TrainJoint(TrainJointArgs),
    /// Train modules for a new language against frozen existing ones.
    AddLanguage(AddLanguageArgs),
    /// Translate a file of sentences.
    Translate(TranslateArgs),
    /// Compute BLEU for a grid of directions and routes.
    Evaluate(EvaluateArgs),
    /// Dump, compare and project sentence representations.
    InspectReps(InspectRepsArgs),
}

#[derive(Debug, Args)]
pub(crate) struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    pub base_vocab: usize,
    /// Number of languages, tagged x, y, z, w, v, u, t, s.
    #[arg(long, default_value_t = 3)]
    pub langs: usize,
    /// Training sentences per language.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub valid: usize,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct BuildVocabArgs {
    /// Data directory holding `<split>.<lang>.txt` files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Target vocabulary size including the four special tokens.
    #[arg(long, default_value_t = run::DEFAULT_VOCAB_SIZE)]
    pub size: usize,
    /// Output file; defaults to `<data>/vocab.<lang>.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Options shared by the training subcommands. Flags override config values.
#[derive(Debug, Args)]
pub(crate) struct TrainOptions {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Distance term: correlation, l1, l2 or none.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct TrainJointArgs {
    #[command(flatten)]
    pub opts: TrainOptions,
    #[arg(long)]
    pub src: Option<String>,
    #[arg(long)]
    pub tgt: Option<String>,
}

#[derive(Debug, Args)]
pub(crate) struct AddLanguageArgs {
    #[command(flatten)]
    pub opts: TrainOptions,
    /// Run directory or checkpoint file holding the trained modules.
    #[arg(long)]
    pub from: PathBuf,
    /// The language to add.
    #[arg(long)]
    pub new: Option<String>,
    /// Training pair `new-pivot`, e.g. `z-x`.
    #[arg(long)]
    pub parallel: Option<String>,
    /// Also train the new decoder from the frozen pivot encoder.
    #[arg(long)]
    pub both_directions: bool,
}

#[derive(Debug, Args)]
pub(crate) struct TranslateArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub src: String,
    #[arg(long)]
    pub tgt: String,
    /// direct, zero_shot or pivot:<lang>.
    #[arg(long, default_value = "direct")]
    pub route: String,
    /// greedy or beam:<width>.
    #[arg(long, default_value = "greedy")]
    pub decoding: String,
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; translations go to stdout when absent. A `.meta`
    /// sidecar describing the request is written next to it.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct EvaluateArgs {
    #[arg(long)]
    pub from: PathBuf,
    /// Grid file with one `label src tgt [via]` line per direction.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "greedy")]
    pub decoding: String,
    /// Evaluate only the first N test sentences.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct InspectRepsArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Number of multi-way sentences to encode.
    #[arg(long, default_value_t = modnmt_core::analysis::DEFAULT_DUMP_SENTENCES)]
    pub sentences: usize,
    /// encoder_final or decoder_last:<lang>.
    #[arg(long, default_value = "encoder_final")]
    pub stage: String,
    /// PCA components in the projection output.
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => run::gen_data(&a),
        Command::BuildVocab(a) => run::build_vocab(&a),
        Command::TrainJoint(a) => run::train_joint(&a),
        Command::AddLanguage(a) => run::add_language(&a),
        Command::Translate(a) => run::translate(&a),
        Command::Evaluate(a) => run::evaluate(&a),
        Command::InspectReps(a) => run::inspect_reps(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `modnmt --help` for usage.");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
