//! Failure classes and their exit codes.

use std::fmt;

use spectempo::certificates::CertificateError;
use spectempo::diffusion::DiffusionError;
use spectempo::evaluation::EvalError;
use spectempo::graphs::GraphError;
use spectempo::inference::InferenceError;
use spectempo::linalg::io::MatrixIoError;
use spectempo::solver::SolverError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Unreadable input or unwritable output.
    Io,
    /// The solver found no admissible point or failed.
    Solver,
    /// Flags or configuration values out of range.
    Config,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn io(message: impl Into<String>) -> Self {
        Self { kind: Kind::Io, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: Kind::Config, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Io => 1,
            Kind::Solver => 2,
            Kind::Config => 3,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            Kind::Io => "io",
            Kind::Solver => "solver",
            Kind::Config => "config",
        }
    }

    /// Prefixes the message with the file or step it concerns.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        // well-formed JSON with the wrong fields or values is a configuration error
        match e.classify() {
            serde_json::error::Category::Data => Self::config(e.to_string()),
            _ => Self::io(e.to_string()),
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Io(_) | GraphError::Json(_) | GraphError::Parse(_) => Self::io(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<MatrixIoError> for Failure {
    fn from(e: MatrixIoError) -> Self {
        Self::io(e.to_string())
    }
}

impl From<DiffusionError> for Failure {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::MatrixIo(_) | DiffusionError::Json(_) => Self::io(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Infeasible(_) | InferenceError::NeverFeasible | InferenceError::Solver(_) => {
                Self { kind: Kind::Solver, message: e.to_string() }
            }
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidProblem(_) => Self::config(e.to_string()),
            _ => Self { kind: Kind::Solver, message: e.to_string() },
        }
    }
}

impl From<CertificateError> for Failure {
    fn from(e: CertificateError) -> Self {
        match e {
            CertificateError::SingularSystem { .. } | CertificateError::ConditionsFail(_) => {
                Self { kind: Kind::Solver, message: e.to_string() }
            }
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::config(e.to_string())
    }
}
