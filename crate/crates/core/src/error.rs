use thiserror::Error;

use crate::graph::FilterId;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the compression toolkit.
///
/// Variants split into two broad families: numeric/structural errors from the
/// compression machinery itself, and I/O or format errors from files and
/// configuration. The CLI maps the former to exit code 2 and the latter to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("duplicate filter record for layer {} channel {}", .0.layer, .0.channel)]
    DuplicateFilter(FilterId),

    #[error("residual group violation: {0}")]
    ResidualGroupViolation(String),

    #[error("pruning would leave layer {layer} with zero channels")]
    LayerWouldBeEmpty { layer: usize },

    #[error("batch norm at layer {layer} does not follow a conv layer")]
    OrphanBatchNorm { layer: usize },

    #[error("model contains no batch norm layers to fold")]
    NothingToFold,

    #[error("model is already quantized")]
    AlreadyQuantized,

    #[error("expected a float model but found a quantized one")]
    WrongModelKind,

    #[error("backward called without a completed forward pass")]
    BackwardWithoutForward,

    #[error("gradient tape already consumed by backward")]
    TapeConsumed,

    #[error("ranked list inconsistent with model: {0}")]
    RankedListMismatch(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("quantized inference is missing activation params for layer {layer}")]
    MissingActivationParams { layer: usize },

    #[error("bad magic bytes in model file")]
    BadMagic,

    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u16),

    #[error("model file truncated")]
    TruncatedFile,

    #[error("malformed model file: {0}")]
    FormatError(String),

    #[error("bad IDX file: {0}")]
    IdxError(String),

    #[error("bad dataset split: {0}")]
    SplitError(String),

    #[error("bad config: {0}")]
    ConfigError(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that stem from files, formats, or configuration rather
    /// than the compression machinery. Used for CLI exit-code mapping.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic
                | Error::UnsupportedVersion(_)
                | Error::TruncatedFile
                | Error::FormatError(_)
                | Error::IdxError(_)
                | Error::SplitError(_)
                | Error::ConfigError(_)
                | Error::Io(_)
        )
    }
}
