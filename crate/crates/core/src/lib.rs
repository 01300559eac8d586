//! Company-success classification from monthly multivariate time series.
//!
//! The crate covers the full desk-scale workflow:
//!
//! * [`data`]: the 16-feature schema, JSONL ingestion, imputation, log
//!   scaling, sentinel filling, padding and the investor-grouped split;
//! * [`synthetic`]: a class-conditional generator standing in for real
//!   company data;
//! * [`models`]: the Transformer classifier with learnable positional
//!   encodings and batch normalization, plus U-GRU, M-GRU and Transformer
//!   encoder baselines, all on top of [`numerics`];
//! * [`training`], [`evaluation`] and [`portfolio`]: loss and optimizer,
//!   metrics, and Monte-Carlo portfolio simulation.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod numerics;
pub mod portfolio;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
