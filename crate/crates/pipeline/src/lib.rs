//! Training and inference pipeline built on the core data types and the
//! networks: splits, augmentation, classifier/segmenter training, whole-volume
//! segmentation with second-opinion filtering, and classifier-driven
//! enlargement of the training set.

pub mod augment;
pub mod dataset;
pub mod enlarge;
pub mod infer;
pub mod split;
pub mod train;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] vcaptcha_core::Error),
    #[error(transparent)]
    Nn(#[from] vcaptcha_nn::NnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
