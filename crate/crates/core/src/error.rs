use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("ordinal class {0} has no samples")]
    EmptyClass(usize),

    #[error("binary labels take a single value; both -1 and +1 are required")]
    SingleGender,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("dataset too small: {0}")]
    TooSmall(String),

    #[error("ordinal label {label} outside 1..={n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("binary label {0} is neither -1 nor +1")]
    InvalidBinaryLabel(i64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("solver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("means of ordinal classes {class} and {} coincide", class + 1)]
    DegenerateMeans { class: usize },

    #[error("degenerate solution: {0}")]
    DegenerateSolution(String),

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("empty input")]
    EmptyInput,

    #[error("cell (class {class}, gender {gender:+}) has too few samples for the requested split")]
    InsufficientSamples { class: usize, gender: i8 },

    #[error("cannot parse value {value:?} at row {row}, column {col:?}")]
    Parse {
        row: usize,
        col: String,
        value: String,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("binary column has {found} distinct values, expected 2")]
    NotBinary { found: usize },

    #[error("unknown label {0:?} for this model")]
    UnknownLabel(String),

    #[error("unsupported model file: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable variant name, used for machine-readable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyClass(_) => "EmptyClass",
            Error::SingleGender => "SingleGender",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::TooSmall(_) => "TooSmall",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::InvalidBinaryLabel(_) => "InvalidBinaryLabel",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::DegenerateMeans { .. } => "DegenerateMeans",
            Error::DegenerateSolution(_) => "DegenerateSolution",
            Error::ZeroVector => "ZeroVector",
            Error::EmptyInput => "EmptyInput",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::Parse { .. } => "ParseError",
            Error::MissingColumn(_) => "MissingColumn",
            Error::NotBinary { .. } => "NotBinary",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::Format(_) => "Format",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
