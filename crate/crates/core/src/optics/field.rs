use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use super::OpticalConfig;
use crate::error::{Error, Result};

/// Sampled complex scalar field on the square simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub values: Array2<Complex64>,
    /// Meters per sample.
    pub pitch: f64,
    pub wavelength: f64,
}

impl ComplexField {
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm_sqr())
    }

    fn check_compatible(&self, other: &ComplexField, what: &str) -> Result<()> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::Shape(format!(
                "{what}: grid {:?} vs {:?}",
                self.values.dim(),
                other.values.dim()
            )));
        }
        if self.pitch != other.pitch || self.wavelength != other.wavelength {
            return Err(Error::Shape(format!(
                "{what}: pitch/wavelength differ ({}, {}) vs ({}, {})",
                self.pitch, self.wavelength, other.pitch, other.wavelength
            )));
        }
        Ok(())
    }
}

fn wavelength_in_config(cfg: &OpticalConfig, lambda: f64) -> Result<()> {
    if cfg
        .wavelengths
        .iter()
        .any(|&w| (w - lambda).abs() <= 1e-12 * w)
    {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "wavelength {lambda} is not one of the configured bands"
        )))
    }
}

/// Builds `exp(i * phase_scale * r^2)` on the configuration grid.
fn quadratic_phase(cfg: &OpticalConfig, lambda: f64, phase_scale: f64) -> ComplexField {
    let m = cfg.sim_grid;
    let pitch = cfg.pitch();
    let dx2 = pitch * pitch;
    let values = Array2::from_shape_fn((m, m), |(r, c)| {
        let (y, x) = (cfg.offset(r), cfg.offset(c));
        let r2 = (x * x + y * y) as f64 * dx2;
        Complex64::from_polar(1.0, phase_scale * r2)
    });
    ComplexField {
        values,
        pitch,
        wavelength: lambda,
    }
}

/// Paraxial spherical wave from an on-axis point at distance `z`,
/// `exp[i k (x^2 + y^2) / (2 z)]`.
pub fn spherical_wave(cfg: &OpticalConfig, lambda: f64, z: f64) -> Result<ComplexField> {
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::Domain(format!("source distance must be positive, got {z}")));
    }
    wavelength_in_config(cfg, lambda)?;
    let k = 2.0 * PI / lambda;
    Ok(quadratic_phase(cfg, lambda, k / (2.0 * z)))
}

/// Thin-lens phase delay `exp[-i k (x^2 + y^2) / (2 f)]`.
pub fn lens_phase(cfg: &OpticalConfig, lambda: f64) -> Result<ComplexField> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Domain(format!("wavelength must be positive, got {lambda}")));
    }
    let k = 2.0 * PI / lambda;
    Ok(quadratic_phase(cfg, lambda, -k / (2.0 * cfg.focal_length)))
}

/// Circular pupil of diameter `D`: 1 where the sample center lies strictly
/// inside the disk, 0 elsewhere.
pub fn aperture_mask(cfg: &OpticalConfig) -> Array2<f64> {
    let m = cfg.sim_grid;
    let radius_samples = 0.5 * cfg.aperture_diameter / cfg.pitch();
    let limit = radius_samples * radius_samples;
    Array2::from_shape_fn((m, m), |(r, c)| {
        let (y, x) = (cfg.offset(r), cfg.offset(c));
        if ((x * x + y * y) as f64) < limit {
            1.0
        } else {
            0.0
        }
    })
}

/// Field immediately behind the lens with the coded aperture attached:
/// `A * T * t * u_in`.
pub fn field_after_lens(
    u_in: &ComplexField,
    lens: &ComplexField,
    aperture: &Array2<f64>,
    transmittance: &Array2<f64>,
) -> Result<ComplexField> {
    u_in.check_compatible(lens, "field_after_lens")?;
    let dim = u_in.values.dim();
    if aperture.dim() != dim || transmittance.dim() != dim {
        return Err(Error::Shape(format!(
            "field_after_lens: aperture {:?} / transmittance {:?} vs field {dim:?}",
            aperture.dim(),
            transmittance.dim()
        )));
    }
    if transmittance.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Domain("transmittance must lie in [0, 1]".into()));
    }
    let mut values = Array2::zeros(dim);
    ndarray::Zip::from(&mut values)
        .and(&u_in.values)
        .and(&lens.values)
        .and(aperture)
        .and(transmittance)
        .for_each(|out, &u, &t, &a, &tr| *out = u * t * (a * tr));
    Ok(ComplexField {
        values,
        pitch: u_in.pitch,
        wavelength: u_in.wavelength,
    })
}

/// `A * t * U_in` for a point at depth `z`: the unmodulated field behind the lens.
pub fn open_field(cfg: &OpticalConfig, lambda: f64, z: f64) -> Result<ComplexField> {
    let u_in = spherical_wave(cfg, lambda, z)?;
    let lens = lens_phase(cfg, lambda)?;
    let aperture = aperture_mask(cfg);
    let ones = Array2::ones(aperture.dim());
    field_after_lens(&u_in, &lens, &aperture, &ones)
}
