//! Robust pose estimation and windowed bundle adjustment with an
//! online-adapted kernel shape.
//!
//! The crate is organized around a generalized robust loss whose shape
//! parameter `alpha` is re-estimated from the residual distribution while a
//! sliding-window bundle adjustment runs. The pieces are:
//!
//! - [`kernel`]: the loss family, its IRLS weights and the truncated
//!   partition function used to compare likelihoods across shapes.
//! - [`alpha`]: grid-search shape estimation from residual magnitudes.
//! - [`geometry`]: SE(3) algebra, pinhole projection and reprojection
//!   residual Jacobians.
//! - [`sim`]: a synthetic dynamic-scene generator with oracle detections
//!   and the depth-aware keypoint filter.
//! - [`solver`]: LM-damped IRLS for single-pose tracking and adaptive
//!   windowed bundle adjustment.
//! - [`eval`]: TUM-format trajectory I/O, rigid alignment and ATE RMSE.
//! - [`experiment`]: the end-to-end tracking/mapping loop and ablation
//!   batches used by the CLI.

pub mod alpha;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod kernel;
pub mod sim;
pub mod solver;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("under-constrained problem: {0}")]
    Observability(String),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trajectory association failed: {0}")]
    Association(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
