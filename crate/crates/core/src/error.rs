use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mismatched lengths: {0}")]
    MismatchedLengths(String),

    #[error("audio duration {audio_secs:.4}s differs from video duration {video_secs:.4}s by more than one hop")]
    AudioDurationMismatch { audio_secs: f64, video_secs: f64 },

    #[error("value out of range: {0}")]
    ValueRange(String),

    #[error("waveform too short: {samples} samples, need at least {required}")]
    TooShort { samples: usize, required: usize },

    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    BadSampleRate(u32),

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("audio features not aligned: {rows} rows is not a multiple of 4")]
    NotAligned { rows: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("epoch must be >= 1, got {0}")]
    BadEpoch(i64),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate frame: video {video_id}, entity {entity_id}, timestamp {timestamp}")]
    DuplicateFrame {
        video_id: String,
        entity_id: String,
        timestamp: f64,
    },

    #[error("degenerate box after clamping: {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("empty track")]
    EmptyTrack,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no positive labels")]
    NoPositives,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("prediction has no matching annotation: {0}")]
    JoinFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
