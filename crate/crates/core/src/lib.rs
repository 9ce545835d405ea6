//! Cascaded-encoder transducer toolkit.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// `Var::add` and friends return `Result`, so the operator traits do not fit.
#![allow(clippy::should_implement_trait)]
#![allow(clippy::large_enum_variant, clippy::needless_range_loop)]

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod frontend;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod transducer;

pub use error::{Error, Result};
