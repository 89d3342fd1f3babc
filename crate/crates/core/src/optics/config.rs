use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::{format_list, KvMap};

/// Physical and sampling description of the thin-lens camera.
///
/// All lengths are in meters. `depth_planes` is stored farthest-first by
/// convention, though any strictly monotone order is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalConfig {
    pub focal_length: f64,
    pub sensor_distance: f64,
    pub aperture_diameter: f64,
    /// Samples per side of the simulated aperture/sensor plane.
    pub sim_grid: usize,
    /// Physical side length of the simulated plane.
    pub window_size: f64,
    /// Side of the extracted PSF kernel in sensor pixels (odd).
    pub psf_crop: usize,
    /// Simulation samples per sensor pixel along each axis.
    pub sensor_bin: usize,
    pub wavelengths: Vec<f64>,
    pub depth_planes: Vec<f64>,
    pub focus_distance: Option<f64>,
}

pub const CONFIG_KEYS: &[&str] = &[
    "focal_length",
    "sensor_distance",
    "aperture_diameter",
    "sim_grid",
    "window_size",
    "psf_crop",
    "sensor_bin",
    "wavelengths",
    "depth_planes",
    "focus_distance",
];

/// Sensor distance that brings `focus_distance` into focus.
pub fn thin_lens_image_distance(focal_length: f64, focus_distance: f64) -> f64 {
    1.0 / (1.0 / focal_length - 1.0 / focus_distance)
}

/// `count` depths equally spaced in inverse depth, farthest first.
pub fn inverse_spaced_depths(near: f64, far: f64, count: usize) -> Vec<f64> {
    let (inv_far, inv_near) = (1.0 / far, 1.0 / near);
    (0..count)
        .map(|j| {
            let t = j as f64 / (count - 1) as f64;
            1.0 / (inv_far + t * (inv_near - inv_far))
        })
        .collect()
}

/// `count` wavelengths equally spaced over `[first, last]`.
pub fn linear_wavelengths(first: f64, last: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![first];
    }
    (0..count)
        .map(|i| first + (last - first) * i as f64 / (count - 1) as f64)
        .collect()
}

impl OpticalConfig {
    /// Desk-scale default: f = 100 mm focused at 1 m, 2 mm aperture,
    /// 46.9 um sensor pixels (3x3 samples), 11 bands over 400-700 nm and
    /// 6 depth planes over 0.4-1.6 m.
    pub fn desk() -> Self {
        let focal_length = 0.1;
        let focus = 1.0;
        Self {
            focal_length,
            sensor_distance: thin_lens_image_distance(focal_length, focus),
            aperture_diameter: 2e-3,
            sim_grid: 256,
            window_size: 4e-3,
            psf_crop: 31,
            sensor_bin: 3,
            wavelengths: linear_wavelengths(400e-9, 700e-9, 11),
            depth_planes: inverse_spaced_depths(0.4, 1.6, 6),
            focus_distance: Some(focus),
        }
    }

    /// Small configuration for gradient checks: 64-sample grid, 3 bands, 2 planes.
    pub fn tiny() -> Self {
        let focal_length = 0.1;
        let focus = 1.0;
        Self {
            focal_length,
            sensor_distance: thin_lens_image_distance(focal_length, focus),
            aperture_diameter: 0.5e-3,
            sim_grid: 64,
            window_size: 1e-3,
            psf_crop: 9,
            sensor_bin: 1,
            wavelengths: vec![450e-9, 550e-9, 650e-9],
            depth_planes: vec![1.6, 0.5],
            focus_distance: Some(focus),
        }
    }

    pub fn num_wavelengths(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn num_depths(&self) -> usize {
        self.depth_planes.len()
    }

    /// Sample pitch of the simulated plane.
    pub fn pitch(&self) -> f64 {
        self.window_size / self.sim_grid as f64
    }

    /// Index of the on-axis sample along each axis.
    pub fn center_index(&self) -> usize {
        self.sim_grid / 2
    }

    /// Signed offset, in samples, of index `m` from the optical axis.
    pub fn offset(&self, m: usize) -> i64 {
        m as i64 - self.center_index() as i64
    }

    pub fn min_depth(&self) -> f64 {
        self.depth_planes.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_depth(&self) -> f64 {
        self.depth_planes
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Uniform band spacing (1 for a single band).
    pub fn band_spacing(&self) -> f64 {
        let l = self.wavelengths.len();
        if l < 2 {
            1.0
        } else {
            (self.wavelengths[l - 1] - self.wavelengths[0]) / (l - 1) as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("focal_length", self.focal_length),
            ("sensor_distance", self.sensor_distance),
            ("aperture_diameter", self.aperture_diameter),
            ("window_size", self.window_size),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.aperture_diameter > self.window_size {
            return Err(Error::Config(format!(
                "aperture_diameter {} exceeds window_size {}",
                self.aperture_diameter, self.window_size
            )));
        }
        if self.sim_grid < 32 {
            return Err(Error::Config(format!(
                "sim_grid must be at least 32, got {}",
                self.sim_grid
            )));
        }
        if self.psf_crop % 2 == 0 {
            return Err(Error::Config(format!(
                "psf_crop must be odd, got {}",
                self.psf_crop
            )));
        }
        if self.sensor_bin == 0 {
            return Err(Error::Config("sensor_bin must be at least 1".into()));
        }
        if self.sensor_bin * self.psf_crop > self.sim_grid {
            return Err(Error::Config(format!(
                "sensor_bin * psf_crop = {} exceeds sim_grid {}",
                self.sensor_bin * self.psf_crop,
                self.sim_grid
            )));
        }
        if self.wavelengths.is_empty() {
            return Err(Error::Config("at least one wavelength is required".into()));
        }
        if self
            .wavelengths
            .iter()
            .any(|&w| !(w.is_finite() && w > 0.0))
        {
            return Err(Error::Config("wavelengths must be positive".into()));
        }
        if self.wavelengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("wavelengths must be strictly increasing".into()));
        }
        if self.depth_planes.len() < 2 {
            return Err(Error::Config("at least two depth planes are required".into()));
        }
        if self
            .depth_planes
            .iter()
            .any(|&z| !(z.is_finite() && z > 0.0))
        {
            return Err(Error::Config("depth planes must be positive".into()));
        }
        let increasing = self.depth_planes.windows(2).all(|w| w[1] > w[0]);
        let decreasing = self.depth_planes.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::Config("depth planes must be strictly monotone".into()));
        }
        let z_min = self.min_depth();
        let lambda_max = self.wavelengths[self.wavelengths.len() - 1];
        if lambda_max / z_min >= 1e-4 {
            return Err(Error::Config(format!(
                "wavelength {lambda_max} is not small against depth {z_min} (ratio must be < 1e-4)"
            )));
        }
        if let Some(focus) = self.focus_distance {
            if !(focus.is_finite() && focus > self.focal_length) {
                return Err(Error::Config(format!(
                    "focus_distance {focus} must exceed the focal length"
                )));
            }
            let expected = thin_lens_image_distance(self.focal_length, focus);
            if (self.sensor_distance - expected).abs() > 1e-9 * expected {
                return Err(Error::Config(format!(
                    "sensor_distance {} violates the thin-lens equation (expected {expected})",
                    self.sensor_distance
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("focal_length", format!("{:?}", self.focal_length));
        kv.set("sensor_distance", format!("{:?}", self.sensor_distance));
        kv.set("aperture_diameter", format!("{:?}", self.aperture_diameter));
        kv.set("sim_grid", self.sim_grid);
        kv.set("window_size", format!("{:?}", self.window_size));
        kv.set("psf_crop", self.psf_crop);
        kv.set("sensor_bin", self.sensor_bin);
        kv.set("wavelengths", format_list(&self.wavelengths));
        kv.set("depth_planes", format_list(&self.depth_planes));
        if let Some(f) = self.focus_distance {
            kv.set("focus_distance", format!("{f:?}"));
        }
        kv
    }

    /// Reads optical keys from `kv`, falling back to [`OpticalConfig::desk`].
    ///
    /// If `focus_distance` is given without `sensor_distance`, the sensor
    /// distance follows from the thin-lens equation.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::desk();
        if let Some(v) = kv.get("focal_length")? {
            cfg.focal_length = v;
        }
        if let Some(v) = kv.get("aperture_diameter")? {
            cfg.aperture_diameter = v;
        }
        if let Some(v) = kv.get("sim_grid")? {
            cfg.sim_grid = v;
        }
        if let Some(v) = kv.get("window_size")? {
            cfg.window_size = v;
        }
        if let Some(v) = kv.get("psf_crop")? {
            cfg.psf_crop = v;
        }
        if let Some(v) = kv.get("sensor_bin")? {
            cfg.sensor_bin = v;
        }
        if let Some(v) = kv.get_list("wavelengths")? {
            cfg.wavelengths = v;
        }
        if let Some(v) = kv.get_list("depth_planes")? {
            cfg.depth_planes = v;
        }
        match kv.raw("focus_distance") {
            Some("none") => cfg.focus_distance = None,
            Some(_) => cfg.focus_distance = kv.get("focus_distance")?,
            None => {}
        }
        match (kv.get::<f64>("sensor_distance")?, cfg.focus_distance) {
            (Some(zi), _) => cfg.sensor_distance = zi,
            (None, Some(focus)) => {
                cfg.sensor_distance = thin_lens_image_distance(cfg.focal_length, focus)
            }
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable 64-bit identifier of this configuration.
    pub fn hash(&self) -> u64 {
        hash_text(&self.to_kv().to_text())
    }
}

/// First eight bytes of the SHA-256 digest, little-endian.
pub fn hash_text(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
