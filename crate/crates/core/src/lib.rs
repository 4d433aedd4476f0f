//! Polynomial chaos coefficient recovery with a decay-structured generative
//! model plus sparse corrections, together with sparse-regression baselines
//! and a stochastic elliptic benchmark.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod elliptic1d;
pub mod error;
pub mod genmod_opt;
pub mod genmodel;
pub mod harness;
pub mod pce;
pub mod regsolvers;

pub use error::{Error, Result};
