use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The beam is (nearly) parallel to the reference plane, so the
    /// projection along the beam is undefined.
    #[error("degenerate projection: |normal . direction| = {0:e} is below threshold")]
    DegenerateProjection(f64),

    #[error("cavity has no points to select from")]
    EmptySelection,

    #[error("degenerate regression data: {0}")]
    DegenerateData(String),

    #[error("cardinality mismatch: pre-ablation surface has {pre} points, target has {target}")]
    CardinalityMismatch { pre: usize, target: usize },

    #[error("infeasible start: {0}")]
    InfeasibleStart(String),

    #[error("ground-truth cavity volume is zero; cut ratios are undefined")]
    ZeroGroundTruth,

    #[error("sparse coverage: {uncovered:.1}% of ROI cells have no measured point nearby")]
    SparseCoverage { uncovered: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{0}: file contains no data")]
    EmptyFile(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
