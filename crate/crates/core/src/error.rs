use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),

    #[error("variable {0} is not on this tape")]
    NotOnTape(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("token {token} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("pretraining reduced loss from {initial:.4} to {last:.4}, short of the required 50%")]
    InsufficientDecrease { initial: f64, last: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("reconstruction threshold {threshold} not reached in {steps} steps (best min score {best:.6})")]
    ThresholdUnreachable { threshold: f64, steps: usize, best: f64 },

    #[error("unknown task id {0:?}")]
    UnknownTask(String),

    #[error("encoder has been discarded; start a new training phase before encoding")]
    EncoderDiscarded,

    #[error("sequence of length {0} is too short for perplexity (need at least 2 tokens)")]
    SequenceTooShort(usize),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("task {index} ({task_id}): {source}")]
    Task {
        index: usize,
        task_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for invariant violations, including ones wrapped in task
    /// context.
    pub fn is_invariant(&self) -> bool {
        match self {
            Error::Invariant(_) => true,
            Error::Task { source, .. } => source.is_invariant(),
            _ => false,
        }
    }

    pub(crate) fn in_task(self, index: usize, task_id: &str) -> Self {
        Error::Task { index, task_id: task_id.to_string(), source: Box::new(self) }
    }
}
