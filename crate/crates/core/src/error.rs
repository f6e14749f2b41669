use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The ordering cannot be emitted at all (too long for the sequence, or
    /// ruled out by hard similarity constraints).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Frame anchors contradict the ordering.
    #[error("infeasible supervision: {0}")]
    InfeasibleSupervision(String),

    /// A feasible lattice whose likelihood still evaluated to zero.
    #[error("numeric underflow: {0}")]
    Underflow(String),

    #[error("non-finite value at frame {frame}: {what}")]
    NonFinite { frame: usize, what: String },

    #[error("path enumeration would visit {count} paths (cap {cap})")]
    SizeLimit { count: u128, cap: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches a record id to supervision failures so training logs name the
    /// offending video.
    pub fn in_record(self, id: &str) -> Error {
        match self {
            Error::InfeasibleSupervision(msg) => {
                Error::InfeasibleSupervision(format!("record {id}: {msg}"))
            }
            Error::Infeasible(msg) => Error::Infeasible(format!("record {id}: {msg}")),
            Error::Underflow(msg) => Error::Underflow(format!("record {id}: {msg}")),
            Error::NonFinite { frame, what } => Error::NonFinite {
                frame,
                what: format!("record {id}: {what}"),
            },
            other => other,
        }
    }

    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) | Error::InfeasibleSupervision(_) => 3,
            Error::Underflow(_) | Error::NonFinite { .. } => 4,
            Error::VocabMismatch(_) => 5,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
