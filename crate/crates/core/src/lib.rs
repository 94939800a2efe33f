//! Synthetic bushfire worlds, a reference spread simulator and a neural
//! emulator trained to reproduce it.

pub mod dataset;
pub mod emulator;
pub mod error;
pub mod evaluation;
pub mod firesim;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod worldgen;

pub use error::{Error, Result};
pub use raster::{Dihedral, Raster};
pub use scalar::Scalar;

pub type Emulator32 = emulator::Emulator<f32>;
pub type Emulator64 = emulator::Emulator<f64>;
pub type Autoencoder32 = emulator::Autoencoder<f32>;
pub type Autoencoder64 = emulator::Autoencoder<f64>;
pub type Sample32 = dataset::Sample<f32>;
pub type Sample64 = dataset::Sample<f64>;
