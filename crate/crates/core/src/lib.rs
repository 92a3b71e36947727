//! Scoring multilevel regression and poststratification (MRP) estimates.
//!
//! Squared error and CRPS of a poststratified estimate decompose into
//! population-weighted cellwise terms. This crate builds on that to score
//! models against known truth, against the sample, with brute-force or
//! Pareto-smoothed importance-sampling leave-one-cell-out cross-validation,
//! and against a reference model when some cells are unobserved.
//!
//! Module map:
//! - [`simulation`]: synthetic populations and constrained samples
//! - [`poststrat`]: the poststratification table and cell subsets
//! - [`model`]: random-intercept logistic models fitted by MCMC
//! - [`mrp`]: per-draw poststratified estimates
//! - [`scoring`]: squared error and CRPS, direct and cellwise
//! - [`loco`]: leave-one-cell-out scores, PSIS and stratified resampling
//! - [`reference`]: reference-model, partial and combined validation
//! - [`experiment`]: replicated simulation studies and reports

pub mod error;
pub mod experiment;
pub mod loco;
pub mod model;
pub mod mrp;
pub mod poststrat;
pub mod reference;
pub mod scoring;
pub mod seed;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};
