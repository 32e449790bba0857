//! Occupancy detection from indoor climate sensors.
//!
//! The crate covers the full workflow on synthetic apartment data:
//!
//! * [`synthgen`] — stochastic occupancy schedules driving first-order
//!   CO₂ / temperature / humidity dynamics, emitted as labeled sensor CSV.
//! * [`dataset`] — CSV ingestion, 30 s grid regularization, chronological
//!   train/validation/test splits.
//! * [`features`] — CO₂ slope, season one-hot, train-set standardization,
//!   sliding sequence windows.
//! * [`linmodel`] — class-weighted logistic regression.
//! * [`svm`] — soft-margin RBF-kernel SVM solved by SMO.
//! * [`lstm`] — stacked LSTM with additive attention, trained with Adam on a
//!   weighted BCE loss through a small reverse-mode tape.
//! * [`evalkit`] — precision/recall/F1/accuracy/ROC-AUC and F1-maximizing
//!   decision-threshold calibration.
//! * [`hyperopt`] — Gaussian-process Bayesian optimization with expected
//!   improvement.
//! * [`pipeline`] / [`cli`] — orchestration used by the `occudet` binary and
//!   the runnable examples.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod hyperopt;
pub mod linmodel;
pub mod lstm;
pub mod pipeline;
pub mod svm;
pub mod synthgen;

pub use error::{Error, Result};
