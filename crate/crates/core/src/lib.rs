//! Prefix-level failure warning from agent traces: trace modeling, step normalization,
//! sparse text features, learned monitors, extracted automata, metrics, and audits.

pub mod automaton;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod monitor;
pub mod observability;
pub mod probes;
pub mod stepview;
pub mod trace_model;

pub use error::{Error, Result};
