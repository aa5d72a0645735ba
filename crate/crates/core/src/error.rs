use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("hierarchy specification is empty")]
    EmptySpec,
    #[error("malformed hierarchy token {0:?}")]
    MalformedToken(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("unknown taxonomy preset {0:?}")]
    UnknownPreset(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("score {value} at ({row}, {col}) is outside [0, 1]")]
    ScoreOutOfRange { row: usize, col: usize, value: f64 },
    #[error("score matrix was produced under a different taxonomy")]
    TaxonomyMismatch,
    #[error("labels are not ancestor-closed at sample {sample}, class {class}")]
    LabelNotClosed { sample: usize, class: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("node {0} has an empty neighborhood")]
    IsolatedNode(usize),
    #[error("need more than k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("label {0:?} is not a leaf of the taxonomy")]
    UnknownLabel(String),
    #[error("patient {0:?} has no cells")]
    EmptyPatient(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid class proportions: {0}")]
    InvalidProportions(String),
    #[error("need at least {needed} patients, got {got}")]
    TooFewPatients { needed: usize, got: usize },
    #[error("sample {0} has an empty truth set")]
    EmptyTruth(usize),
    #[error("expected constrained scores")]
    UnconstrainedInput,
    #[error("loss diverged at epoch {epoch}: {detail}")]
    DivergedLoss { epoch: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
