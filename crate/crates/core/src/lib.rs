//! Forecasting of forced Liénard dynamics with physics-regularised recurrent
//! networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`lienard`] integrates the forced oscillator and evaluates its residual.
//! * [`series`] turns raw series into derivative channels and supervised windows.
//! * [`neural`] is a small hand-differentiated network kernel (dense, LSTM,
//!   1-D convolution, max-pool, Adam, checkpoints).
//! * [`metrics`] holds the data and physics losses plus the evaluation metrics.
//! * [`models`] assembles the forecaster and its baselines and trains them.
//! * [`diagnostics`] estimates Hurst and Lyapunov exponents and ranks models.

pub mod diagnostics;
pub mod error;
pub mod lienard;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod series;

pub use error::{Error, Result};
pub use lienard::{LienardParams, OscState, Trajectory};
pub use series::{DerivativeMode, DerivedSeries, ScalerParams, SupervisedWindowSet, TimeSeries};
