use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("cross entropy: every target position is ignored")]
    AllIgnored,

    #[error("cross entropy: target {target} at position {position} outside vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("attack lexicon overlaps caption words: {0:?}")]
    LexiconOverlap(Vec<String>),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("training diverged at epoch {epoch} step {step}; last good checkpoint retained")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<crate::captioner::CaptionModel>,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("config checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ConfigMismatch { stored: u64, computed: u64 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("inputs were produced by different configurations: {0:?}")]
    MixedProvenance(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
