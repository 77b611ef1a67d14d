use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid model descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no samples found")]
    NoSamples,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("registry: {0}")]
    Registry(String),
    #[error("subspace `{predicate}` of expert `{new}` overlaps expert `{existing}`")]
    OverlappingSubspace { new: String, existing: String, predicate: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}

pub(crate) use bail;
