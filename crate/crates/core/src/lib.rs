//! Collective-variable discovery from time-lagged conditional flow matching,
//! with baseline CV learners, Langevin dynamics on analytic toy systems, and
//! steered-MD / OPES evaluation harnesses.

pub mod analysis;
pub mod cvmodels;
pub mod dynamics;
pub mod enhanced;
pub mod error;
pub mod flowgen;
pub mod geometry;
pub mod nn;
pub mod stats;
pub mod systems;

pub use error::{Error, Result};
pub use systems::{BasinLabel, Configuration, SystemKind, SystemSpec};
