//! Simulation and end-to-end design of color-coded apertures for
//! single-snapshot depth estimation.
//!
//! The pipeline runs wave-optics PSF simulation ([`optics`]) for a coded
//! aperture ([`cca`]), layered scene rendering ([`render`]), a compact
//! encoder-decoder network ([`decoder`]) and the joint optimizer ([`train`]).

pub mod cca;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fft;
pub mod kv;
pub mod losses;
pub mod optics;
pub mod preview;
pub mod render;
pub mod rng;
pub mod train;

pub(crate) mod binio;

pub use binio::{read_file, write_atomic};
pub use error::{Error, Result};
