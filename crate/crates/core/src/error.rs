use msl_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = MslError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MslError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("lambda value {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("at least one sensory modality is required")]
    MissingModality,
    #[error("sensory data does not match modality {0}")]
    ModalityMismatch(&'static str),
    #[error("detector count {detectors} is shorter than the image diagonal ({diagonal:.1} px)")]
    DetectorsTooFew { detectors: usize, diagonal: f64 },
    #[error("{0}: dimensions must be powers of two")]
    NotPowerOfTwo(String),
    #[error("sampling rate {rate} is below the centre fraction {center}")]
    RateBelowCenter { rate: f64, center: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
