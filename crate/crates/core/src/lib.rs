//! Temporal graph matching for a two-sided work marketplace.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod negmine;
pub mod pipeline;
pub mod sampler;
pub mod store;
pub mod synth;
pub mod textmatch;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
