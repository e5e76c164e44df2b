//! Event argument extraction with dual, event-guided adaptive prefixes.

pub mod data;
pub mod eae;
pub mod error;
pub mod numerics;
pub mod prefixes;
pub mod rng;
pub mod train_eval;
pub mod transformer;

#[cfg(test)]
mod oracle;

pub use error::{DegapError, Result};
