use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate loss: mask selects no positions")]
    DegenerateLoss,

    #[error("non-finite gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("model is frozen; refusing to update `{0}`")]
    Frozen(String),

    #[error("invalid example `{id}`: {reason}")]
    InvalidExample { id: String, reason: String },

    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "prompt of {total} rows exceeds limit {max} \
         (graph {graph}, text {text}, query {query}, answer {answer})"
    )]
    PromptOverflow {
        total: usize,
        max: usize,
        graph: usize,
        text: usize,
        query: usize,
        answer: usize,
    },

    #[error("non-finite loss at step {step}: {config}")]
    NanLoss { step: usize, config: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
