//! Evacuation analysis from GPS trajectories: staypoints, home locations,
//! evacuation detection, fragility-curve fitting and distance laws.

// Negated float comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod distdist;
pub mod error;
pub mod evac;
pub mod fragility;
pub mod geo;
pub mod homeloc;
pub mod pipeline;
pub mod popest;
pub mod synth;
pub mod trajectory;

pub use config::PipelineConfig;
pub use error::{Error, ErrorClass, Result};
