//! Categorical probabilistic forecasting over graph-structured categories.
//!
//! The crate covers the full pipeline: synthetic graphs and ground-truth
//! advection dynamics, Poisson event sampling, a small reverse-mode
//! differentiation engine, three forecasters (a neural ODE with GIN
//! dynamics and two ablations), maximum-likelihood training, evaluation,
//! and ingestion of county-level case counts.

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advection;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod covid;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod models;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
