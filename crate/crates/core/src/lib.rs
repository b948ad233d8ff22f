//! Desk-scale option pricing laboratory.
//!
//! The pipeline runs from a (real or synthetic) panel of S&P-style put
//! quotes through GARCH(1,1) volatility forecasts, Black-Scholes reference
//! prices, three trainable pricers (feedforward network, random forest,
//! polynomial least squares), walk-forward backtests scored by MAPE,
//! perturbation-based no-arbitrage checks, and Shapley/PCA attribution.

pub mod arbitrage;
pub mod backtest;
pub mod bsm;
pub mod error;
pub mod explain;
pub mod features;
pub mod garch;
pub mod market_data;
pub mod models;
pub mod util;

pub use error::{Error, Result};
