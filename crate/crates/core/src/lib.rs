#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod bench;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod prototypes;
pub mod queue;
pub mod rng;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
