use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node {node} ({op}): {detail}")]
    Node {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("unknown slot `{0}`")]
    UnknownSlot(String),

    #[error("missing binding for slot `{0}`")]
    MissingBinding(String),

    #[error("output node must be scalar, has shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("graph has no output node")]
    NoOutput,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite function value at probe {0}")]
    NonFiniteProbe(usize),

    #[error("degenerate likelihood (all samples -inf) at batch index {0}")]
    DegenerateLikelihood(usize),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("training aborted at step {step}, batch {batch}: {detail}")]
    TrainingAborted {
        step: u64,
        batch: usize,
        detail: String,
    },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
