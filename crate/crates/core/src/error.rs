use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A Cholesky-based solve hit a matrix with a non-positive pivot.
    #[error("matrix is not positive definite ({0})")]
    NonPositiveDefinite(&'static str),

    #[error("cavity distribution is improper (precision not positive definite)")]
    ImproperCavity,

    #[error("tilted quadrature underflow: observation incompatible with cavity")]
    QuadratureUnderflow,

    #[error("moments diverged (magnitude {magnitude:e})")]
    DivergedMoments { magnitude: f64 },

    #[error("negative rate {rate} for reaction {reaction} at t = {time} in state {state:?}")]
    NegativeRate {
        reaction: usize,
        rate: f64,
        time: f64,
        state: Vec<i64>,
    },

    #[error("sample path diverged at step {step}")]
    DivergedPath { step: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("at grid node {node}: {source}")]
    AtNode {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("in sweep {sweep}: {source}")]
    InSweep {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_node(self, node: usize) -> Self {
        match self {
            e @ Error::AtNode { .. } => e,
            e => Error::AtNode {
                node,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn in_sweep(self, sweep: usize) -> Self {
        Error::InSweep {
            sweep,
            source: Box::new(self),
        }
    }

    /// The innermost error, with node/sweep annotations stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtNode { source, .. } | Error::InSweep { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NonPositiveDefinite(_)
                | Error::ImproperCavity
                | Error::QuadratureUnderflow
                | Error::DivergedMoments { .. }
                | Error::DivergedPath { .. }
        )
    }
}
