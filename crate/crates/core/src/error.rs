use css_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CssError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("chunk of {len} frames exceeds the configured maximum of {max}")]
    ChunkLength { len: usize, max: usize },
    #[error("attention cache error: {0}")]
    Cache(String),
    #[error("corrupt weights file: {0}")]
    CorruptFile(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),
    #[error("unsupported sample rate {0} Hz: audio must be 16 kHz (16000 Hz)")]
    SampleRate(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CssError>;
