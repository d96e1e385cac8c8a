use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Modelling assumptions a true mixing measure and its input space must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assumption {
    /// Bounded input space and compact parameter space.
    BoundedSpace,
    /// Last component pinned: zero gating slope and zero gating bias.
    Identifiability,
    /// Expert parameters pairwise distinct.
    DistinctExperts,
    /// At least one nonzero gating slope.
    InputDependentGating,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::BoundedSpace => "U.1 (bounded input space, finite parameters)",
            Assumption::Identifiability => "U.2 (identifiability: last component must have beta0 = 0 and beta1 = 0)",
            Assumption::DistinctExperts => "U.3 (expert parameters (a, b, sigma) pairwise distinct)",
            Assumption::InputDependentGating => "U.4 (at least one gating slope beta1 nonzero)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("assumptions violated: {}", list(.0))]
    Assumptions(Vec<Assumption>),

    #[error("degenerate data at sample {index}: {reason}")]
    DegenerateData { index: usize, reason: String },

    #[error("unsupported value: {0}")]
    Unsupported(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn list(items: &[Assumption]) -> String {
    items.iter().map(|a| a.to_string()).collect::<Vec<_>>().join("; ")
}
