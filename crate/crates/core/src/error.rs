use thiserror::Error;

/// Errors raised while building or running a containment scenario.
///
/// Agent indices carried by the variants are 1-based, matching how agents
/// are numbered in scenario files and traces.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("followers {0:?} have no directed path from any leader")]
    UnreachableFollowers(Vec<usize>),

    #[error("sum of Phi matrices is singular (min singular value {0:e})")]
    SingularPhiSum(f64),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("(A, B) pair is not controllable (controllability rank {rank} < {n})")]
    NotControllable { rank: usize, n: usize },

    #[error("regulator equation unsolvable for this (A,B,S): residual {residual:e}")]
    RegulatorUnsolvable { residual: f64 },

    #[error(
        "Riccati iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    CareNoConvergence { iterations: usize, residual: f64 },

    #[error("leader model violates the marginal-stability assumption: {0}")]
    LeaderAssumption(String),

    #[error("safety QP for agent {agent} is infeasible; conflicting pairs {pairs:?}")]
    QpInfeasible {
        agent: usize,
        pairs: Vec<(usize, usize)>,
    },

    #[error("at t = {t}: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {what} at t = {t}")]
    NonFinite { t: f64, what: String },
}

impl Error {
    pub(crate) fn at(self, t: f64) -> Self {
        match self {
            Error::AtTime { .. } | Error::NonFinite { .. } => self,
            other => Error::AtTime {
                t,
                source: Box::new(other),
            },
        }
    }

    /// Strips any timestamp wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_qp_infeasible(&self) -> bool {
        matches!(self.root(), Error::QpInfeasible { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
