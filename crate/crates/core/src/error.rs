use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("degenerate vector (norm below 1e-8) in {context}")]
    DegenerateVector { context: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss closure is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("optimizer step requested but no parameter received a gradient")]
    EmptyGradient,

    #[error("{what} {value} out of range {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: String,
    },

    #[error("training diverged at {stage} task {task} epoch {epoch} step {step}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        task: usize,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("identity pool of {pool} cannot supply {requested} identities")]
    Pool { pool: usize, requested: usize },

    #[error("empty prompt: the text encoder needs at least one token")]
    EmptyPrompt,

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("corrupt file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}
