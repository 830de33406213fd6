//! Error type shared across the crate.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in spectrum, data, and inference routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("input eigenvalue list is empty")]
    EmptyInput,

    #[error("population eigenvalues must be positive, got {0}")]
    NonPositiveEigenvalue(f64),

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("evaluation point {x} is at or below the largest pole {pole}")]
    PoleViolation { x: f64, pole: f64 },

    #[error("no positive root of phi' found right of the poles")]
    NoRootFound,

    #[error(
        "fixed-point solve did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("real z = {z} lies inside (-{edge}, {edge}); the Stieltjes branch is ambiguous there")]
    BranchAmbiguity { z: f64, edge: f64 },

    #[error("group {group} has only {size} members; at least {min} required")]
    GroupTooSmall {
        group: usize,
        size: usize,
        min: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("a single-population model has no mean-difference spikes")]
    SingleGroup,

    #[error("estimated second spectral moment is not positive ({0}); the input is too degenerate to renormalize")]
    NonPositiveBhat(f64),

    #[error("lambda = {lambda} is not above the bulk edge {edge}; spike inversion is undefined")]
    BelowEdge { lambda: f64, edge: f64 },

    #[error("Q(alpha) is singular at alpha = {0}")]
    SingularQ(f64),

    #[error("resolvent is singular at the requested shift")]
    SingularResolvent,

    #[error("cluster spec asks for multiplicity {expected} but the -1 eigenspace has multiplicity {found}")]
    ClusterMismatch { expected: usize, found: usize },

    #[error("expected exactly two clusters, found {0}")]
    WrongClusterCount(usize),

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("degenerate denominator in the composite score")]
    DegenerateDenominator,

    #[error("population moments a_p/b_p are unavailable for the requested correction")]
    MissingOracle,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{failed} of {replicates} replicates failed; aborting the study")]
    ExcessiveFailures { failed: usize, replicates: usize },
}
