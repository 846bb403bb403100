//! Forecast linear augmented projection.
//!
//! Augment a multivariate series `y_t` with linear components
//! `c_t = Phi y_t`, forecast every series of `z_t = [y_t; c_t]` with any base
//! forecaster, then project the forecasts onto the subspace where the
//! components equal `Phi` times the originals. Under the base forecast error
//! covariance `W`, the projected forecasts of `y` never have larger error
//! variance than the base forecasts, and the reduction grows with the number
//! of components.
//!
//! Modules:
//! * [`components`]: component weights (PCA, random, orthonormal) and
//!   component series.
//! * [`projection`]: constraint and projection operators, variance
//!   reduction diagnostics.
//! * [`covariance`]: empirical and shrinkage estimates of `W_h`.
//! * [`forecasting`]: base forecasters and augmented forecasting.
//! * [`simulation`]: VAR data generating processes and population moments.
//! * [`evaluation`]: expanding-window cross-validation and rank tests.
//! * [`ingestion`]: panel CSV input/output and standardization.

pub mod components;
pub mod covariance;
pub mod error;
pub mod evaluation;
pub mod forecasting;
pub mod ingestion;
pub mod linalg;
pub mod projection;
pub mod simulation;

pub use error::{FlapError, Result};
