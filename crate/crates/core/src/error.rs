use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Usage = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected `VOL1`, found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("declared dims {dims:?} exceed the 4 GiB payload limit")]
    DimOverflow { dims: [u32; 4] },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("unsupported header field {field}={value}")]
    BadHeader { field: &'static str, value: u32 },
    #[error("volume kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: &'static str, found: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes at voxel {voxel}")]
    LabelOutOfRange { voxel: usize, label: u32, classes: u32 },
    #[error("non-finite value at voxel {voxel}{}", context_suffix(.context))]
    NonFinite { voxel: usize, context: Option<String> },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("tape integrity check failed: {0}")]
    TapeIntegrity(String),
    #[error("checkpoint integrity check failed: {0}")]
    CheckpointIntegrity(String),
    #[error("{0}")]
    Undefined(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn context_suffix(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    /// Stable machine-readable identifier for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::DimOverflow { .. } => "dim_overflow",
            Error::Truncated { .. } => "truncated",
            Error::BadHeader { .. } => "bad_header",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::Shape(_) => "shape",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidParam(_) => "invalid_param",
            Error::TapeIntegrity(_) => "tape_integrity",
            Error::CheckpointIntegrity(_) => "checkpoint_integrity",
            Error::Undefined(_) => "undefined",
            Error::GradcheckFailed(_) => "gradcheck_failed",
            Error::Config(_) => "config",
            Error::Json { .. } => "json",
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::NonFinite { .. } | Error::GradcheckFailed(_) => ExitCode::Numeric,
            Error::Config(_) => ExitCode::Usage,
            _ => ExitCode::Data,
        }
    }
}
