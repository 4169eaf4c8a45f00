//! Condense the real-to-fake distribution gap of a binary detection task
//! into a small bank of learnable discrepancy maps by matching empirical
//! characteristic functions in a frozen feature space, then replay past
//! tasks by variance-preserving composition of those maps with current real
//! samples. A synthetic continual-learning harness measures how much the
//! replay reduces forgetting.

pub mod cf;
pub mod config;
pub mod ddc;
pub mod detector;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod harness;
pub mod mcr;
pub mod numerics;
pub mod sampler;

pub use error::{Error, Result};
