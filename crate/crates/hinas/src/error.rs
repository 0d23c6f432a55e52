//! Error types and process exit-code mapping.
//!
//! Configuration and usage problems exit with code 1; numeric failures
//! detected mid-run (non-finite losses or gradients, degenerate similarity
//! values) exit with code 2 so callers can distinguish "fix the invocation"
//! from "the run diverged".

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("conv2d: input has {got} channels, weight expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("conv2d: {channels} channels not divisible into {groups} groups")]
    BadGroups { channels: usize, groups: usize },
    #[error("even kernel size {0} has no symmetric 'same' padding at stride 1")]
    EvenKernel(usize),
    #[error("pixel_shuffle: {channels} channels not divisible by {scale}^2")]
    BadShuffle { channels: usize, scale: usize },
    #[error("backward called on an untracked tensor")]
    NotTracked,
    #[error("backward called on an already-consumed tape")]
    TapeConsumed,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("genotype: {0}")]
    InvalidGenotype(String),
    #[error("width path: {0}")]
    InvalidPath(String),
    #[error("exhaustive path enumeration supports at most {max} layers, got {got}")]
    TooManyLayers { max: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("split needs at least 3 ids, got {0}")]
    TooFewIds(usize),
    #[error("patch size {patch} exceeds image extent {h}x{w}")]
    PatchTooLarge { patch: usize, h: usize, w: usize },
    #[error("patch size {patch} not divisible by scale {scale}")]
    PatchNotDivisible { patch: usize, scale: usize },
    #[error("upscale factor {0} unsupported (expected 2, 3 or 4)")]
    BadScale(usize),
    #[error("noise level {0} is negative")]
    NegativeSigma(f64),
    #[error("{h}x{w} image not divisible by scale {scale}")]
    NotDivisible { h: usize, w: usize, scale: usize },
    #[error("image {path}: {detail}")]
    BadImage { path: PathBuf, detail: String },
    #[error("manifest: {0}")]
    BadManifest(String),
}

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("mean SSIM {0} is not positive; log-SSIM undefined")]
    NonPositiveSsim(f64),
}

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("unrecognized checkpoint format tag {0:?}")]
    BadFormat(String),
    #[error("checkpoint is missing entry {0:?}")]
    MissingEntry(String),
    #[error("checkpoint entry {name:?} has {got} elements, expected {expected}")]
    SizeMismatch { name: String, expected: usize, got: usize },
    #[error("checkpoint holds a {got} state, expected {expected}")]
    WrongKind { expected: &'static str, got: String },
}

#[derive(Debug, Error)]
pub enum HinasError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl HinasError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HinasError {
        let path = path.into();
        move |source| HinasError::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> HinasError {
        let path = path.into();
        move |source| HinasError::Json { path, source }
    }

    /// Process exit code: 1 for configuration/usage errors, 2 for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HinasError::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = HinasError> = std::result::Result<T, E>;
