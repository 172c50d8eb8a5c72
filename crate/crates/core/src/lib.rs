//! Hybrid waveform/spectrogram singing-voice separation.
//!
//! The crate is organised bottom-up: [`tensor`] provides the differentiable
//! math, [`audio`] and [`dsp`] the signal plumbing, [`filterbank`] and
//! [`model`] the network, [`train`] the optimisation loop and checkpoints,
//! and [`metrics`] the objective evaluation.

pub mod audio;
pub mod dsp;
pub mod error;
pub mod filterbank;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
