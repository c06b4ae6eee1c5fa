//! Representation drift diagnostics for sequence-labeling models, plus a
//! small synthetic testbed for incremental-learning ablations.

pub mod drift;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod snapshot;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
