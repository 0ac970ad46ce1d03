use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("chunk of {chunk_ms} ms violates the 40 ms codec frame granularity")]
    Granularity { chunk_ms: u32 },
    #[error("input of {len} samples is not a multiple of the {frame}-sample codec frame")]
    Length { len: usize, frame: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("step {got} appended out of order (expected {expected})")]
    StepOrder { expected: usize, got: usize },
    #[error("reference is empty")]
    EmptyReference,
    #[error("position {pos} outside 0..={len}")]
    Range { pos: usize, len: usize },
    #[error("layout grammar violation at element {index}: {reason}")]
    Grammar { index: usize, reason: String },
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),
    #[error("invalid waveform: {0}")]
    Waveform(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] streamtse_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
