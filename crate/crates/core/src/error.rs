use std::path::PathBuf;

use crate::sim::Trace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// The incentive would drive a prosumer's demand below zero.
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    /// Operational limits that cannot hold simultaneously for any incentive.
    #[error("contradictory limits: {0}")]
    ContradictoryLimits(String),

    /// The program has an empty feasible set. `violated` lists the
    /// constraints carried by the certificate of infeasibility.
    #[error("infeasible program; certificate involves {}", violated.join(", "))]
    Infeasible { violated: Vec<String> },

    #[error("non-finite measurement: {0}")]
    Measurement(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("controller diverged at iteration {iteration} (|xi|_inf = {magnitude:e})")]
    Divergence {
        iteration: usize,
        magnitude: f64,
        trace: Box<Trace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            found,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::dim(what, expected, found))
    }
}
