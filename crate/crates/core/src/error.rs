use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("line {line}: unknown operand form `{text}`")]
    UnknownOperand { line: usize, text: String },

    #[error("function `{function}`: unresolved label `{label}`")]
    UnresolvedLabel { function: String, label: String },

    #[error("unsupported mnemonic `{mnemonic}` at instruction {index}")]
    UnsupportedMnemonic { mnemonic: String, index: usize },

    #[error("dependence graph has {nodes} nodes, above the cap of {cap}; truncate the function upstream")]
    NodeCapExceeded { nodes: usize, cap: usize },

    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    /// Wraps an analysis or parse error with the function it arose in.
    #[error("function `{function}`{at}: {source}")]
    InFunction {
        function: String,
        /// Empty, or ` line N` pointing at the offending listing line.
        at: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Divergence(_) => 3,
            Error::Config(_) => 4,
            Error::InFunction { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    /// Attaches the function name and, when known, its listing line.
    pub fn in_function(self, function: &str, line: Option<usize>) -> Error {
        Error::InFunction {
            function: function.to_string(),
            at: line.map(|l| format!(" line {l}")).unwrap_or_default(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
