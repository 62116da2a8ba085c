//! Restricted Boltzmann machine learning dynamics and phase-transition analysis.

pub mod chains;
pub mod config;
pub mod dataio;
pub mod enumerate;
pub mod error;
pub mod hysteresis;
pub mod modelio;
pub mod run;
pub mod spectra;
pub mod spin;
pub mod stats;
pub mod synth;
pub mod theory;
pub mod train;

pub use error::{Error, Phase, Result};
