//! Cross-modal supervised scene flow for 4D radar.
//!
//! The crate covers the full pipeline: a synthetic multi-modal world
//! ([`simworld`]), pseudo-label extraction ([`supervision`]), a small
//! reverse-mode autodiff engine ([`diffcore`]), the two-stage flow network
//! ([`network`]), its losses ([`losses`]), training ([`training`]) and
//! evaluation ([`metrics`]).

pub mod diffcore;
pub mod error;
pub mod fsutil;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod seed;
pub mod simworld;
pub mod supervision;
pub mod training;

mod serde_util;

pub use error::{Error, Result};
