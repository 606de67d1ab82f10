use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid record {id}: {reason}")]
    Record { id: String, reason: String },
    #[error("AUC undefined for class {class}: ground truth has only one class")]
    UndefinedAuc { class: usize },
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;
