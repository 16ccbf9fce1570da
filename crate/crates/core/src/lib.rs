//! Hierarchical dynamical-systems reconstruction.
//!
//! Each subject's shallow piecewise-linear RNN (or vanilla RNN) is generated
//! from a low-dimensional feature vector through projection matrices shared by
//! the whole group. Everything here is allocation-only numerics: benchmark ODE
//! generators, the model and its hierarchization schemes, generalized teacher
//! forcing with hand-written backpropagation through time, RAdam, the two
//! long-term agreement measures and the feature-space analyses.
//!
//! IO, configuration files and the command line live in the `hdsr` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod dynsys;
mod error;
pub mod eval;
pub mod fft;
pub mod linalg;
pub mod math;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Mat;
