use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no active coordinates detected")]
    EmptySupport,

    #[error("P2 minimizer is infeasible for the perturbed model (|v|^2 = {norm_sq:.6}, bound {bound:.6})")]
    Infeasible { norm_sq: f64, bound: f64 },

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("malformed record: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
