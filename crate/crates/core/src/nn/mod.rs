//! Minimal convolutional building blocks with hand-written backward passes.

pub mod conv;
pub mod dense;
pub mod ops;
pub mod params;

pub use conv::{Conv2d, ConvGeom, ConvTranspose2d};
pub use dense::Dense;
pub use params::{Adam, Params};
