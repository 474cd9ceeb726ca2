//! Neurosymbolic communication policies for decentralized multi-agent planning.

pub mod dsl;
pub mod env;
pub mod error;
pub mod harness;
pub mod policy;
pub mod synth;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
