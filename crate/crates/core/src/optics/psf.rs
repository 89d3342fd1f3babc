use ndarray::{s, Array2};
use num_complex::Complex64;

use super::{open_field, OpticalConfig, Propagator};
use crate::error::{Error, Result};

/// Fraction of transmitted energy the crop must capture before a warning is raised.
pub const CAPTURE_WARN_THRESHOLD: f64 = 0.99;

/// Placement of the `K x K` sensor-pixel window on the simulation grid.
///
/// The central pixel's `B x B` block contains the on-axis sample; for odd
/// `B` it is centered on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorWindow {
    pub start: usize,
    pub crop: usize,
    pub bin: usize,
}

impl SensorWindow {
    pub fn new(cfg: &OpticalConfig) -> Self {
        let half = (cfg.psf_crop - 1) / 2;
        let start = cfg.center_index() - half * cfg.sensor_bin - cfg.sensor_bin / 2;
        Self {
            start,
            crop: cfg.psf_crop,
            bin: cfg.sensor_bin,
        }
    }

    /// Side of the window in simulation samples.
    pub fn span(&self) -> usize {
        self.crop * self.bin
    }

    pub fn crop_field(&self, full: &Array2<Complex64>) -> Array2<Complex64> {
        let (a, b) = (self.start, self.start + self.span());
        full.slice(s![a..b, a..b]).to_owned()
    }

    /// Sums `B x B` blocks of a window-sized intensity map into pixels.
    pub fn bin_intensity(&self, window: &Array2<f64>) -> Array2<f64> {
        let (k, b) = (self.crop, self.bin);
        let mut out = Array2::zeros((k, k));
        for r in 0..k {
            for c in 0..k {
                let mut acc = 0.0;
                for i in 0..b {
                    for j in 0..b {
                        acc += window[[r * b + i, c * b + j]];
                    }
                }
                out[[r, c]] = acc;
            }
        }
        out
    }

    /// Adjoint of [`bin_intensity`](Self::bin_intensity): spreads each pixel value over its block.
    pub fn unbin(&self, pixels: &Array2<f64>) -> Array2<f64> {
        let b = self.bin;
        Array2::from_shape_fn((self.span(), self.span()), |(r, c)| pixels[[r / b, c / b]])
    }
}

/// One depth/wavelength PSF.
#[derive(Debug, Clone)]
pub struct Psf {
    /// `K x K` kernel normalized by the open-aperture energy.
    pub kernel: Array2<f64>,
    /// Sum of `kernel`.
    pub energy: f64,
    /// Transmitted energy behind the coded aperture, same normalization.
    pub transmitted: f64,
    pub warning: Option<String>,
}

/// PSF for transmittance grid `t_grid` at wavelength `lambda` and source depth `z`.
///
/// `|U_sen|^2` is binned into sensor pixels, cropped to `K x K`, and divided by
/// the energy of the open (T = 1) aperture field, so an unobstructed in-focus
/// PSF sums to about 1 and color filters attenuate physically.
pub fn compute_psf(
    cfg: &OpticalConfig,
    t_grid: &Array2<f64>,
    lambda: f64,
    z: f64,
) -> Result<Psf> {
    let open = open_field(cfg, lambda, z)?;
    if t_grid.dim() != open.values.dim() {
        return Err(Error::Shape(format!(
            "transmittance grid {:?} vs simulation grid {:?}",
            t_grid.dim(),
            open.values.dim()
        )));
    }
    if t_grid.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Domain("transmittance must lie in [0, 1]".into()));
    }
    let open_energy = open.energy();
    let mut coded = open.clone();
    coded.values *= &t_grid.mapv(|t| Complex64::new(t, 0.0));
    let transmitted = coded.energy() / open_energy;

    let prop = Propagator::new(cfg.sim_grid, cfg.pitch(), lambda, cfg.sensor_distance)?;
    let sensor = prop.propagate(&coded)?;
    let window = SensorWindow::new(cfg);
    let crop = window.crop_field(&sensor.values);
    let kernel = window.bin_intensity(&crop.mapv(|v| v.norm_sqr() / open_energy));
    let energy = kernel.sum();

    let warning = (transmitted > 0.0 && energy < CAPTURE_WARN_THRESHOLD * transmitted).then(|| {
        format!(
            "crop captures {:.4} of transmitted energy at lambda={lambda:e}, z={z}",
            energy / transmitted
        )
    });
    Ok(Psf {
        kernel,
        energy,
        transmitted,
        warning,
    })
}

/// Intensity centroid `(row, col)` in pixel coordinates.
pub fn centroid(kernel: &Array2<f64>) -> (f64, f64) {
    let total = kernel.sum();
    let (mut r0, mut c0) = (0.0, 0.0);
    for ((r, c), &v) in kernel.indexed_iter() {
        r0 += r as f64 * v;
        c0 += c as f64 * v;
    }
    (r0 / total, c0 / total)
}

/// Mean squared radius about the kernel center, weighted by intensity.
pub fn second_moment(kernel: &Array2<f64>) -> f64 {
    let center = (kernel.nrows() / 2) as f64;
    let total = kernel.sum();
    kernel
        .indexed_iter()
        .map(|((r, c), &v)| ((r as f64 - center).powi(2) + (c as f64 - center).powi(2)) * v)
        .sum::<f64>()
        / total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peak(k: &Array2<f64>) -> f64 {
        k.iter().copied().fold(0.0, f64::max)
    }

    #[test]
    fn opaque_aperture_gives_zero_psf() {
        let cfg = OpticalConfig::tiny();
        let t = Array2::zeros((cfg.sim_grid, cfg.sim_grid));
        let psf = compute_psf(&cfg, &t, cfg.wavelengths[0], 1.0).unwrap();
        assert!(psf.kernel.iter().all(|&v| v == 0.0));
        assert_eq!(psf.energy, 0.0);
        assert!(psf.warning.is_none());
    }

    #[test]
    fn in_focus_open_psf_is_centered_and_symmetric() {
        let cfg = OpticalConfig::desk();
        let t = Array2::ones((cfg.sim_grid, cfg.sim_grid));
        let psf = compute_psf(&cfg, &t, cfg.wavelengths[5], cfg.focus_distance.unwrap()).unwrap();
        let k = &psf.kernel;
        let (r, c) = centroid(k);
        let mid = (cfg.psf_crop / 2) as f64;
        assert!((r - mid).abs() < 0.05 && (c - mid).abs() < 0.05);
        let n = k.nrows();
        for i in 0..n {
            for j in 0..n {
                let v = k[[i, j]];
                assert!((v - k[[n - 1 - i, j]]).abs() < 1e-6);
                assert!((v - k[[i, n - 1 - j]]).abs() < 1e-6);
                assert!((v - k[[j, i]]).abs() < 1e-6);
            }
        }
        assert!(psf.energy > 0.99 && psf.energy <= 1.0 + 1e-12, "{}", psf.energy);
    }

    #[test]
    fn defocus_lowers_peak_and_widens() {
        let cfg = OpticalConfig::desk();
        let t = Array2::ones((cfg.sim_grid, cfg.sim_grid));
        let lambda = cfg.wavelengths[5];
        let focus = compute_psf(&cfg, &t, lambda, cfg.focus_distance.unwrap()).unwrap();
        for &z in &[0.5, 0.7, 1.6] {
            let off = compute_psf(&cfg, &t, lambda, z).unwrap();
            assert!(peak(&off.kernel) < peak(&focus.kernel), "z={z}");
            assert!(second_moment(&off.kernel) > second_moment(&focus.kernel), "z={z}");
        }
    }

    #[test]
    fn half_transmittance_quarters_energy() {
        let cfg = OpticalConfig::tiny();
        let ones = Array2::ones((cfg.sim_grid, cfg.sim_grid));
        let a = compute_psf(&cfg, &ones, cfg.wavelengths[1], 1.6).unwrap();
        let b = compute_psf(&cfg, &(ones * 0.5), cfg.wavelengths[1], 1.6).unwrap();
        for (x, y) in a.kernel.iter().zip(b.kernel.iter()) {
            assert!((0.25 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn narrow_crop_raises_capture_warning() {
        let mut cfg = OpticalConfig::desk();
        cfg.psf_crop = 3;
        let t = Array2::ones((cfg.sim_grid, cfg.sim_grid));
        let psf = compute_psf(&cfg, &t, cfg.wavelengths[0], 0.4).unwrap();
        assert!(psf.warning.is_some());
        assert!(psf.energy < psf.transmitted);
    }

    #[test]
    fn window_bin_adjoint() {
        let w = SensorWindow {
            start: 0,
            crop: 3,
            bin: 2,
        };
        let x = Array2::from_shape_fn((6, 6), |(r, c)| (r * 6 + c) as f64);
        let y = Array2::from_shape_fn((3, 3), |(r, c)| (r as f64 - c as f64) * 0.5);
        let lhs = (&w.bin_intensity(&x) * &y).sum();
        let rhs = (&x * &w.unbin(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
