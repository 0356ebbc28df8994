use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer id {id} (valid range 1..={max})")]
    InvalidLayerId { id: usize, max: usize },
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("invalid split config: {0}")]
    InvalidSplitConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid stage: {0}")]
    InvalidStage(String),
    #[error("training diverged in stage {stage}, epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { stage: usize, epoch: usize, batch: usize, loss: f64 },
    #[error("unknown recipe `{0}`")]
    UnknownRecipe(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("tensor contains NaN or infinite values")]
    InvalidTensor,
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("missing configuration: {0}")]
    MissingConfig(String),
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("network timeout: {0}")]
    NetworkTimeout(String),
    #[error("protocol error: {code}: {message}")]
    Protocol { code: String, message: String },
    #[error("trace exhausted: t0 = {t0} s lies outside the trace [{start}, {end}] s")]
    TraceExhausted { t0: f64, start: f64, end: f64 },
    #[error("invalid channel model: {0}")]
    InvalidChannel(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
