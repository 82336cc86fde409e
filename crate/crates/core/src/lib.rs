//! Hidden-cohort fairness over embedding datasets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
