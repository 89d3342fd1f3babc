use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use super::ComplexField;
use crate::error::{Error, Result};
use crate::fft::{signed_index, Fft2};

/// Angular-spectrum transfer function over one distance, with its FFT plan.
///
/// `H(fx, fy) = exp[i k z sqrt(1 - (lambda fx)^2 - (lambda fy)^2)]` on the
/// propagating band and 0 for evanescent frequencies.
pub struct Propagator {
    plan: Fft2,
    transfer: Array2<Complex64>,
    pitch: f64,
    wavelength: f64,
}

impl Propagator {
    pub fn new(grid: usize, pitch: f64, wavelength: f64, distance: f64) -> Result<Self> {
        if !(distance.is_finite() && distance >= 0.0) {
            return Err(Error::Domain(format!(
                "propagation distance must be non-negative, got {distance}"
            )));
        }
        Ok(Self {
            plan: Fft2::new(grid, grid),
            transfer: transfer_function(grid, pitch, wavelength, distance),
            pitch,
            wavelength,
        })
    }

    pub fn propagate(&self, u: &ComplexField) -> Result<ComplexField> {
        if u.values.dim() != self.plan.shape()
            || u.pitch != self.pitch
            || u.wavelength != self.wavelength
        {
            return Err(Error::Shape(
                "field does not match the propagator grid/wavelength".into(),
            ));
        }
        let mut values = u.values.as_standard_layout().into_owned();
        self.plan.forward(&mut values);
        values *= &self.transfer;
        self.plan.inverse(&mut values);
        Ok(ComplexField {
            values,
            pitch: u.pitch,
            wavelength: u.wavelength,
        })
    }
}

/// Exact free-space transfer function sampled on the FFT frequency grid.
pub fn transfer_function(
    grid: usize,
    pitch: f64,
    wavelength: f64,
    distance: f64,
) -> Array2<Complex64> {
    let k = 2.0 * PI / wavelength;
    let df = 1.0 / (grid as f64 * pitch);
    Array2::from_shape_fn((grid, grid), |(r, c)| {
        let fy = signed_index(r, grid) * df;
        let fx = signed_index(c, grid) * df;
        let radicand = 1.0 - (wavelength * fx).powi(2) - (wavelength * fy).powi(2);
        if radicand < 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::from_polar(1.0, k * distance * radicand.sqrt())
        }
    })
}

/// Propagates `u` over `distance` with the angular-spectrum method.
pub fn angular_spectrum_propagate(u: &ComplexField, distance: f64) -> Result<ComplexField> {
    let (rows, cols) = u.values.dim();
    if rows != cols {
        return Err(Error::Shape(format!("field must be square, got {rows}x{cols}")));
    }
    Propagator::new(rows, u.pitch, u.wavelength, distance)?.propagate(u)
}
