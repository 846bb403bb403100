use thiserror::Error;

/// Errors returned by this crate.
#[derive(Debug, Error)]
pub enum FlapError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("series `{column}` has zero variance")]
    DegenerateSeries { column: String },

    #[error("incompatible centering/scaling transforms: {0}")]
    IncompatibleTransform(String),

    #[error("covariance matrix is not positive definite: {0}")]
    CovarianceNotPd(String),

    #[error("component sequence is not nested: {0}")]
    Nesting(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("all residuals are constant")]
    DegenerateResiduals,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("process is not stable (companion spectral radius {radius:.6} >= 1)")]
    Stability { radius: f64 },

    #[error("duplicate cell at time `{time}`, series `{series}`")]
    DuplicateCell { time: String, series: String },

    #[error("missing data at {}", format_locations(.0))]
    MissingData(Vec<(String, String)>),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("ranks are identical across all methods for every observation")]
    DegenerateRanks,

    #[error("method `{method}` failed on {failed} of {cells} cells (first cause: {cause})")]
    MethodFailed {
        method: String,
        failed: usize,
        cells: usize,
        cause: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_locations(cells: &[(String, String)]) -> String {
    const SHOWN: usize = 20;
    let mut out: Vec<String> = cells
        .iter()
        .take(SHOWN)
        .map(|(t, s)| format!("({t}, {s})"))
        .collect();
    if cells.len() > SHOWN {
        out.push(format!("... {} more", cells.len() - SHOWN));
    }
    out.join(", ")
}

pub type Result<T, E = FlapError> = std::result::Result<T, E>;
