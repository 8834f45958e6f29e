//! Link-level OFDM simulation and channel-estimation workbench.
//!
//! The crate simulates one 72-subcarrier x 14-symbol OFDM slot over an ETU
//! Rayleigh-fading channel, estimates the channel from staggered pilots with
//! classical methods (LS plus bilinear interpolation, frequency-domain MMSE)
//! and with HA02, a hybrid transformer-encoder / residual-convolutional
//! estimator trained on simulated slots. A small reverse-mode tensor engine
//! ([`numerics`]) carries the HA02 forward and backward passes; [`training`]
//! and [`eval`] provide dataset generation, the Adam training loop, MSE/
//! denoising-gain sweeps and magnitude pruning.

pub mod channel;
pub mod estimators;
pub mod eval;
pub mod ha02;
pub mod numerics;
pub mod ofdm;
pub mod rng;
pub mod training;
