use std::path::PathBuf;

use modnmt_tensor::TensorError;
use thiserror::Error;

use crate::trainer::RunManifest;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("token id {id} is out of range for a vocabulary of {size} tokens")]
    TokenOutOfRange { id: usize, size: usize },
    #[error(
        "misaligned parallel text: {src_lines} source lines vs {tgt_lines} target lines \
         (line {first_unpaired} has no counterpart)"
    )]
    Alignment {
        src_lines: usize,
        tgt_lines: usize,
        first_unpaired: usize,
    },
    #[error("pair {index} needs {needed} tokens per row, above the batch budget of {budget}")]
    BatchBudget { index: usize, needed: usize, budget: usize },
    #[error("cipher: {0}")]
    Cipher(String),
    #[error("composition error: {0}")]
    Composition(String),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("module `{0}` is already registered")]
    DuplicateModule(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("vocabulary hash mismatch for `{module}`: module expects {expected}, got {found}")]
    VocabMismatch {
        module: String,
        expected: String,
        found: String,
    },
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        manifest: Box<RunManifest>,
    },
    #[error("route error: {0}")]
    Route(String),
    #[error("bleu: {0}")]
    Bleu(String),
    #[error("analysis: {0}")]
    Analysis(String),
    #[error("config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NmtError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> NmtError {
    let path = path.into();
    move |source| NmtError::Io { path, source }
}
