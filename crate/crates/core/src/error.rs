use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sequence too short for guide poses: {frames} frames, need at least {needed}")]
    TooShortForGuides { frames: usize, needed: usize },
    #[error("need at least two frames")]
    NeedTwoFrames,
    #[error("pose/skeleton DOF mismatch: pose has {pose} angles, skeleton has {skeleton}")]
    DofMismatch { pose: usize, skeleton: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unaligned dyad audio: self lasts {self_s:.4} s, other lasts {other_s:.4} s")]
    UnalignedAudio { self_s: f64, other_s: f64 },
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("malformed feature file {path}: {reason}")]
    MalformedFeatureFile { path: PathBuf, reason: String },
    #[error("corrupt take {path}: {reason}")]
    CorruptTake { path: PathBuf, reason: String },
    #[error("unsupported format version {0:?}")]
    UnknownVersion(String),
    #[error("non-finite loss while training {model} at step {step}")]
    Diverged { model: String, step: usize },
    #[error("token index {index} out of range for codebook size {size}")]
    InvalidToken { index: usize, size: usize },
    #[error("audio too short: {frames} frames, need at least {needed}")]
    AudioTooShort { frames: usize, needed: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
