use thiserror::Error;

/// Errors surfaced by the pricing engine.
///
/// The CLI maps these onto process exit codes: configuration errors exit
/// with 2, numeric failures with 3 and constraint-infeasibility with 4.
#[derive(Debug, Error)]
pub enum EngineError {
    /// Invalid configuration, contract terms, model data or call arguments.
    #[error("config error: {0}")]
    Config(String),

    /// A contract whose volume constraints cannot be satisfied.
    #[error("infeasible contract: {0}")]
    Infeasible(String),

    /// Non-finite values or other numeric breakdown, with enough context to
    /// replay the failing step.
    #[error("numeric error: {message}")]
    Numeric {
        message: String,
        /// Training iteration at which the failure occurred, when applicable.
        iteration: Option<usize>,
        /// Seed of the stream that produced the failing batch, when applicable.
        seed: Option<u64>,
    },

    /// A query about a state that cannot occur under the given terms
    /// (for example an unreachable cumulative volume).
    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EngineError {
    pub fn numeric(message: impl Into<String>) -> Self {
        EngineError::Numeric {
            message: message.into(),
            iteration: None,
            seed: None,
        }
    }

    /// Exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) => 2,
            EngineError::Infeasible(_) => 4,
            EngineError::Numeric { .. } => 3,
            EngineError::State(_) => 3,
            EngineError::Io(_) => 2,
        }
    }
}
