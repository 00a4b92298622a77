//! Training and sampling machinery for diffusion-based imputation of
//! incomplete physical fields.
//!
//! The library is organized around a single pipeline:
//!
//! - [`tensor`] — dense N-d arrays with a reverse-mode differentiation tape,
//!   periodic/zero-padded convolution, and a power-of-two FFT;
//! - [`schedule`] — the variance-preserving noise schedule, forward
//!   perturbation, data↔noise conversion, and the deterministic ODE step;
//! - [`masks`] — observation-mask distributions, the context/query
//!   partitioner, and Monte Carlo coverage diagnostics;
//! - [`denoiser`] — a small residual conv net conditioned on time and a
//!   context mask;
//! - [`training`] — the masked denoising objective and its optimizer loop,
//!   instrumented with per-dimension update statistics;
//! - [`sampling`] — single-step ensemble imputation and the multi-step
//!   ODE sampler with weighted expectation combination;
//! - [`oracle`] — analytic Gaussian conditionals, a brute-force discrete
//!   optimum, and executable verifiers for the estimator identities;
//! - [`pdegen`] — synthetic advection / shallow-water / Navier-Stokes
//!   datasets and the on-disk dataset format;
//! - [`evalkit`] — reconstruction metrics, PDE residuals, and ablation
//!   orchestration.
//!
//! Scalar precision is generic: `f64` is the reference precision used by
//! oracles and verification, `f32` is accepted for training. Concrete
//! aliases [`Field32`] / [`Field64`] are provided at the crate root.

pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod masks;
pub mod oracle;
pub mod pdegen;
pub mod sampling;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod training;

mod real;

pub use error::{CoreError, Result};
pub use real::Real;
pub use tensor::Field;

/// Training-precision field.
pub type Field32 = tensor::Field<f32>;
/// Reference-precision field used by oracles and verification.
pub type Field64 = tensor::Field<f64>;
