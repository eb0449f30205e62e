use std::path::PathBuf;

use crate::dataset::{Axis, Direction};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("coordinate {0} has zero variance")]
    DegenerateVariance(Axis),

    #[error("fewer than two points survive trimming")]
    EmptyResult,

    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("pair metadata file not found at {}", .0.display())]
    MissingMeta(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("all points are identical; median pairwise distance is zero")]
    AllPointsIdentical,

    #[error("kernel system is not positive definite even after regularization {regularization}")]
    SingularSystem { regularization: f64 },

    #[error("mechanism has no closed-form inverse")]
    NonInvertibleMechanism,

    #[error("index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("derivative penalty of order {0} is not supported (only 2)")]
    UnsupportedOrder(u32),

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("integrator exceeded {max_steps} steps")]
    StepLimitExceeded { max_steps: usize },

    #[error("integrator state diverged at u = {at}")]
    NonFiniteState { at: f64 },

    #[error("quadrature did not reach tolerance on [{lo}, {hi}]")]
    QuadratureFailure { lo: f64, hi: f64 },

    #[error("trajectory {index} failed: {source}")]
    IntegrationFailure {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{} point(s) failed, first at index {}: {}", .0.len(), .0[0].0, .0[0].1)]
    PointFailures(Vec<(usize, Error)>),

    #[error("direction {direction}: {source}")]
    Directional {
        direction: Direction,
        #[source]
        source: Box<Error>,
    },

    #[error("no rows to aggregate")]
    EmptyInput,

    #[error("{0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn tagged(self, direction: Direction) -> Self {
        Error::Directional {
            direction,
            source: Box::new(self),
        }
    }
}
