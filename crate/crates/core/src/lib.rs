//! Speech anti-spoofing countermeasure workbench.
//!
//! Front ends turn a trial into frame features, a back end turns features
//! into a two-class score, and the evaluation, statistics and probing
//! modules measure how those scores behave.

pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod probe;
pub mod stats;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
