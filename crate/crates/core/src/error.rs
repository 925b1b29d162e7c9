use std::path::PathBuf;

/// Errors raised anywhere in the simulator, generator, learner or harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to load {what}: {message}")]
    Load { what: String, message: String },
    #[error("invalid {what}: {}", .failures.join("; "))]
    Validation { what: String, failures: Vec<String> },
    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },
    #[error("{0}")]
    Domain(String),
    #[error("agent {agent} cannot perform {action}: action outside its action space")]
    Capability { agent: usize, action: String },
    #[error("agent index {index} out of range ({count} agents)")]
    AgentIndex { index: usize, count: usize },
    #[error("task generation failed: {0}")]
    Generation(String),
    #[error("demonstration failed: {0}")]
    Demonstration(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid thresholds: {0}")]
    Threshold(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no path to cell ({x}, {y})")]
    Path { x: i32, y: i32 },
    #[error("no valid viewpoint for target `{0}`")]
    UnreachableTarget(String),
    #[error("replan required: {0}")]
    Replan(String),
    #[error("label {label} outside head arity {arity}")]
    Label { label: usize, arity: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trajectory log corrupt at record {index}: {reason}")]
    Corrupt { index: usize, reason: String },
    #[error("scene hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Load {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
