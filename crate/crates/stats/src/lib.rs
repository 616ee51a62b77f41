//! Interval regression on network activations, progression summaries and
//! the evaluation statistics used to compare atrophy measures.

pub mod baseline;
pub mod error;
pub mod hypothesis;
pub mod metrics;
pub mod ols;
pub mod progression;
pub mod samplesize;

pub use error::{Result, StatsError};
