//! Numerical laboratory for lazy random walks in a one-dimensional random
//! environment.
//!
//! The crate is organised around one experiment pipeline:
//!
//! * [`env`] — sampling a site environment, diffusive rescaling, and the
//!   derived noise fields that approximate white noise.
//! * [`walk`] — quenched walk simulation, exact quenched expectations, the
//!   discrete generator, martingale residuals, and a pathwise Itô-type
//!   representation of test-function increments.
//! * [`kernel`] — exact lazy-walk transition tables, the continuous Gaussian
//!   kernel, local-CLT error scans, and uniform Gaussian-bound scans.
//! * [`rough`] — discrete rough-path lifts, weighted Hölder norms, rough
//!   integrals, trapezoidal sums, and a discrete sewing check.
//! * [`pde`] — the quenched parabolic difference equation: direct marching,
//!   mild (Duhamel) form, summation-by-parts identities, and the gradient
//!   process `v^δ` with its space-time interpolation.
//! * [`couple`] — a constructive coupling of the rescaled environment to a
//!   Brownian environment via quantile transforms, with rough-path distance
//!   diagnostics.
//! * [`harness`] — end-to-end convergence-rate studies and exponent
//!   bookkeeping.
//!
//! Everything is deterministic given a seed; no file or network access
//! happens outside the explicit export helpers.

pub mod couple;
pub mod env;
pub mod harness;
pub mod kernel;
pub mod numerics;
pub mod pde;
pub mod rng;
pub mod rough;
pub mod walk;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter fails a precondition (range, sign, exponent window, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// The requested jump probabilities leave the admissible ellipticity band.
    #[error("ellipticity violation: {0}")]
    Ellipticity(String),
    /// Two grid-indexed objects do not share a grid.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    /// The operation is not defined for this configuration.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    /// An iterative numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Underlying I/O failure during export/import.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// JSON (de)serialisation failure during export/import.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    /// CSV write failure during export.
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
