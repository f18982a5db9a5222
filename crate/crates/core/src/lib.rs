//! Testbench for a blindly adapting CNN equalizer on a dispersive
//! intensity-modulation / direct-detection (IM/DD) optical link.
//!
//! The crate is organised along the signal chain and the training loop:
//!
//! * [`channel`] simulates pulse shaping, chromatic dispersion, the
//!   square-law detector and additive noise, and measures bit errors.
//! * [`cnn`] is a small 1D-CNN whose backward pass is written out as
//!   explicit flipped-kernel and input-gradient convolutions.
//! * [`loss`] holds the supervised MSE and the unsupervised PAM-2/PAM-4
//!   losses with their analytic gradients.
//! * [`volterra`] is the third-order Volterra reference equalizer.
//! * [`quant`] emulates fixed-point arithmetic and learns bit-widths.
//! * [`pipeline`] models the streaming forward/backward hardware pipeline.
//! * [`experiment`] drives the dispersion, SNR, bit-width and pipeline
//!   sweeps and writes their CSV artifacts.

pub mod channel;
pub mod checkpoint;
pub mod cnn;
pub mod eval;
pub mod config;
pub mod experiment;
pub mod loss;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod selftest;
pub mod volterra;

mod error;

pub use error::{Error, Result};
