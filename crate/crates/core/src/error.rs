use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate correlation: {0} has zero variance")]
    DegenerateCorrelation(&'static str),

    #[error("zero variance: residuals are constant")]
    ZeroVariance,

    #[error("adjacency has zero total weight")]
    ZeroAdjacency,

    #[error("no rows")]
    NoRows,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("unknown region id `{0}`")]
    UnknownRegion(String),

    #[error("missing region(s): {}", .0.join(", "))]
    MissingRegions(Vec<String>),

    #[error(
        "geometry does not match the regions (no feature for: [{}]; features with unknown region_id: [{}])",
        .missing.join(", "),
        .unknown.join(", ")
    )]
    GeometryMismatch { missing: Vec<String>, unknown: Vec<String> },

    #[error("unknown variant `{name}`; valid variants: {}", .valid.join(", "))]
    UnknownVariant { name: String, valid: Vec<String> },

    #[error("no attention weights recorded (RAA block inactive or not yet updated)")]
    NoAttention,

    #[error("missing `original` baseline record; percentage deltas are undefined")]
    MissingBaseline,

    #[error("training diverged at epoch {epoch}: non-finite {term}")]
    Diverged { epoch: usize, term: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
