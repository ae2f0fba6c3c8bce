//! Control-bounded A/D conversion with a quadrature analog frontend.
//!
//! The pipeline is: design a leapfrog low-pass ([`system`]), lift it to a band-pass around a
//! notch frequency, attach local quadrature controls ([`control`], [`frontend`]), simulate
//! ([`sim`]), reconstruct the input from the control bits with a calibrated FIR bank
//! ([`estimator`]) and measure the result ([`analysis`]). [`montecarlo`] repeats the whole
//! chain on randomly perturbed component values.

pub mod analysis;
pub mod control;
pub mod error;
pub mod estimator;
pub mod frontend;
pub mod montecarlo;
pub mod pipeline;
pub mod sim;
pub mod system;

pub use error::{Error, Result};
