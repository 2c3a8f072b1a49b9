use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("non-finite gradient produced by op `{op}`")]
    NonFiniteGradient { op: &'static str },

    #[error("not a permutation of 0..{len}: {detail}")]
    InvalidPermutation { len: usize, detail: String },

    #[error("parameter `{name}` is trainable but has no gradient")]
    MissingGradient { name: String },

    #[error("row {row} is not a probability distribution (sum {sum}, min {min})")]
    InvalidSimplex { row: usize, sum: f64, min: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("modality {modality}: {detail}")]
    Modality { modality: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contrastive loss: {0}")]
    Contrastive(String),

    #[error("support too large for exhaustive enumeration ({outcomes} batches > cap {cap}); use the Monte Carlo estimator")]
    SupportTooLarge { outcomes: u128, cap: u128 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
