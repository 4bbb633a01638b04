// Comparisons written as !(x > 0.0) are deliberate: they treat NaN as a
// validation failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Bayesian factor-augmented VAR with Normal-Gamma shrinkage priors,
//! external-instrument and sign-restriction identification of the monetary
//! shock, and regional impulse-response analysis.

pub mod chainio;
pub mod cli;
pub mod config;
pub mod data;
pub mod dic;
pub mod dist;
pub mod error;
pub mod gibbs;
pub mod ident;
pub mod irf;
pub mod model;
pub mod state_space;
