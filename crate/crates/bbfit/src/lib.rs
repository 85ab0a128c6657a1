//! Batchwise backfitting for structured additive distributional regression.
//!
//! Models describe every parameter of a response distribution (location,
//! scale, zero probability, ...) through its own additive predictor of
//! penalized splines, linear effects and tensor interactions. Fitting never
//! touches the full data at once: each iteration draws a batch, takes one
//! penalized weighted least squares step per term with a step-length damped
//! update, and judges smoothing parameters and update acceptance on the next
//! batch, so models scale to data far beyond memory.

pub mod datastore;
pub mod engine;
pub mod eval;
pub mod families;
pub mod linalg;
pub mod model;
pub mod simgen;
pub mod terms;

pub use engine::{fit, Criterion, FitOptions, FitResult, Policy};
pub use model::{ModelSpec, PreparedModel};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
