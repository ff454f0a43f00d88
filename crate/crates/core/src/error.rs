//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is out of its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A mesh file or in-memory mesh failed validation.
    #[error("mesh error: {0}")]
    Mesh(String),

    /// An element's current volume became non-positive during a solve.
    #[error("element inversion: tet {tet} has signed volume {volume:.3e}")]
    ElementInverted { tet: usize, volume: f64 },

    /// A cable path contains two coincident consecutive points.
    #[error("degenerate cable segment {segment} of cable {cable} (length {length:.3e})")]
    DegenerateSegment {
        cable: usize,
        segment: usize,
        length: f64,
    },

    /// A constraint row has no support on free degrees of freedom.
    #[error("degenerate constraint: row {0} is identically zero on free DOFs")]
    DegenerateConstraint(usize),

    /// The stiffness factorization hit a non-positive pivot.
    #[error("factorization failed: non-positive pivot {pivot:.3e} at DOF {dof}")]
    Factorization { dof: usize, pivot: f64 },

    /// Newton iteration did not reach the residual tolerance.
    #[error("no convergence after {iters} iterations (residual {residual:.3e}, tol {tol:.3e})")]
    NoConvergence {
        iters: usize,
        residual: f64,
        tol: f64,
    },

    /// W_aa (or a coupling block) is numerically singular.
    #[error("singular matrix in {context} (condition estimate {cond:.3e})")]
    Singular { context: String, cond: f64 },

    /// The QP constraint set admits no feasible point.
    #[error("infeasible problem: {0}")]
    Infeasible(String),

    /// A numeric failure outside the cases above (NaN loss, non-PSD Hessian, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dimension mismatch between model and data.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Dataset collection failed at every grid point.
    #[error("collection failed: {0}")]
    Collection(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
