use std::fmt;

/// Errors raised anywhere in the training, projection, dreaming and fusion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("unknown {0}")]
    Lookup(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{stage} (task {task}): {source}")]
    Stage {
        stage: Stage,
        task: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Broad failure class, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self.root() {
            Error::Config(_) => ErrorClass::Config,
            Error::Format { .. } | Error::Data(_) | Error::Io(_) => ErrorClass::Data,
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Other,
}

/// Pipeline stage that produced an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    FirstTask,
    Basis,
    Slow,
    Fast,
    Dream,
    Fusion,
    Evaluate,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::FirstTask => "first-task training",
            Stage::Basis => "basis construction",
            Stage::Slow => "slow phase",
            Stage::Fast => "fast phase",
            Stage::Dream => "dreaming",
            Stage::Fusion => "fusion",
            Stage::Evaluate => "evaluation",
            Stage::Persist => "persistence",
        };
        f.write_str(name)
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage, task: usize) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage, task: usize) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            task,
            source: Box::new(e),
        })
    }
}
