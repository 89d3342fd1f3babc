//! Wave-optics model of a thin lens with a coded aperture attached.
//!
//! A point source at depth `z` yields a spherical wavefront at the lens. The
//! field behind the lens is the product of pupil, aperture transmittance,
//! lens phase, and incident wave; the angular-spectrum method carries it to
//! the sensor, and the PSF is its squared magnitude.

mod basis;
mod config;
mod field;
mod propagate;
mod psf;
mod stack;

pub use basis::{basis_fields, psf_and_gradient, BasisBank, BasisFieldSet, CellMap, PsfJacobian};
pub use config::{
    hash_text, inverse_spaced_depths, linear_wavelengths, thin_lens_image_distance,
    OpticalConfig, CONFIG_KEYS,
};
pub use field::{aperture_mask, field_after_lens, lens_phase, open_field, spherical_wave, ComplexField};
pub use propagate::{angular_spectrum_propagate, transfer_function, Propagator};
pub use psf::{centroid, compute_psf, second_moment, Psf, SensorWindow, CAPTURE_WARN_THRESHOLD};
pub use stack::{PsfStack, PSF_MAGIC};
pub(crate) use stack::RawPsf;
