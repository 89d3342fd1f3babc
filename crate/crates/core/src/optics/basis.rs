//! Basis-field decomposition of the coded-aperture PSF.
//!
//! Every step from the aperture plane to the sensor is linear in the
//! transmittance, so the sensor field is `U = sum_c T_c V_c + V_clear`, where
//! `V_c` is the propagated field of the open aperture restricted to cell `c`.
//! The PSF is then an explicit quadratic form in the cell transmittances and
//! its gradient is `2 Re(conj(U) V_c)`.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;
use rayon::prelude::*;

use super::{open_field, OpticalConfig, Propagator, PsfStack, SensorWindow};
use crate::cca::CodedAperture;
use crate::error::{Error, Result};

/// Sample-to-cell assignment of an `N x N` aperture code.
///
/// The code covers the `D x D` square circumscribing the pupil; cell `(i, j)`
/// is row `i` (y) and column `j` (x), flattened as `i * N + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMap {
    pub n: usize,
    index: Array2<u32>,
}

impl CellMap {
    pub const OUTSIDE: u32 = u32::MAX;

    pub fn new(cfg: &OpticalConfig, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("cell grid must be at least 1x1".into()));
        }
        let m = cfg.sim_grid;
        let half_span = 0.5 * cfg.aperture_diameter / cfg.pitch();
        let cell = cfg.aperture_diameter / cfg.pitch() / n as f64;
        let locate = |idx: usize| -> Option<usize> {
            let u = (cfg.offset(idx) as f64 + half_span) / cell;
            // Snap values within rounding noise of a cell boundary.
            let u = if (u - u.round()).abs() < 1e-9 { u.round() } else { u };
            if u >= 0.0 && u < n as f64 {
                Some(u.floor() as usize)
            } else {
                None
            }
        };
        let cols: Vec<Option<usize>> = (0..m).map(locate).collect();
        let index = Array2::from_shape_fn((m, m), |(r, c)| match (cols[r], cols[c]) {
            (Some(i), Some(j)) => (i * n + j) as u32,
            _ => Self::OUTSIDE,
        });
        Ok(Self { n, index })
    }

    pub fn cell_of(&self, r: usize, c: usize) -> Option<usize> {
        let v = self.index[[r, c]];
        (v != Self::OUTSIDE).then_some(v as usize)
    }

    pub fn grid_dim(&self) -> (usize, usize) {
        self.index.dim()
    }

    /// Expands per-cell values onto the grid, using `outside` elsewhere.
    pub fn expand(&self, cell_values: &[f64], outside: f64) -> Array2<f64> {
        self.index.mapv(|v| {
            if v == Self::OUTSIDE {
                outside
            } else {
                cell_values[v as usize]
            }
        })
    }

    /// Mean of `grid` over each cell's samples (NaN for empty cells).
    pub fn cell_average(&self, grid: &Array2<f64>) -> Vec<f64> {
        let cells = self.n * self.n;
        let mut sum = vec![0.0; cells];
        let mut count = vec![0usize; cells];
        for (&idx, &v) in self.index.iter().zip(grid.iter()) {
            if idx != Self::OUTSIDE {
                sum[idx as usize] += v;
                count[idx as usize] += 1;
            }
        }
        sum.iter()
            .zip(&count)
            .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect()
    }
}

/// Sensor-window basis fields for one `(lambda, z)` pair.
#[derive(Debug, Clone)]
pub struct BasisFieldSet {
    /// One `KB x KB` field per cell.
    pub fields: Vec<Array2<Complex64>>,
    /// Contribution of pupil samples not covered by any cell (transmittance 1).
    pub clear: Array2<Complex64>,
    pub n: usize,
    pub wavelength: f64,
    pub depth: f64,
    /// Energy of the open-aperture field, the PSF normalizer.
    pub open_energy: f64,
    pub window: SensorWindow,
    pub config_hash: u64,
}

/// Propagates the open-aperture field restricted to each cell of `cells`.
pub fn basis_fields(
    cfg: &OpticalConfig,
    cells: &CellMap,
    lambda: f64,
    z: f64,
) -> Result<BasisFieldSet> {
    if cells.grid_dim() != (cfg.sim_grid, cfg.sim_grid) {
        return Err(Error::Shape("cell map does not match the simulation grid".into()));
    }
    let open = open_field(cfg, lambda, z)?;
    let prop = Propagator::new(cfg.sim_grid, cfg.pitch(), lambda, cfg.sensor_distance)?;
    let window = SensorWindow::new(cfg);
    let n_cells = cells.n * cells.n;

    let mut fields = Vec::with_capacity(n_cells);
    let mut part = open.clone();
    for cell in 0..=n_cells {
        let target = if cell == n_cells { None } else { Some(cell) };
        for ((r, c), v) in part.values.indexed_iter_mut() {
            *v = if cells.cell_of(r, c) == target {
                open.values[[r, c]]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        let sensor = prop.propagate(&part)?;
        fields.push(window.crop_field(&sensor.values));
    }
    let clear = fields.pop().expect("clear field present");
    Ok(BasisFieldSet {
        fields,
        clear,
        n: cells.n,
        wavelength: lambda,
        depth: z,
        open_energy: open.energy(),
        window,
        config_hash: cfg.hash(),
    })
}

impl BasisFieldSet {
    /// Sensor-window field `sum_c T_c V_c + V_clear`.
    pub fn sensor_field(&self, transmittance: &[f64]) -> Array2<Complex64> {
        let mut u = self.clear.clone();
        for (field, &t) in self.fields.iter().zip(transmittance) {
            if t != 0.0 {
                u.scaled_add(Complex64::new(t, 0.0), field);
            }
        }
        u
    }

    /// Kernel for per-cell transmittances, with the sensor field it came from.
    pub fn psf(&self, transmittance: &[f64]) -> (Array2<f64>, Array2<Complex64>) {
        let u = self.sensor_field(transmittance);
        let scale = 1.0 / self.open_energy;
        let kernel = self.window.bin_intensity(&u.mapv(|v| v.norm_sqr() * scale));
        (kernel, u)
    }

    /// Vector-Jacobian product: `dL/dT_c` given `dL/dkernel`.
    pub fn transmittance_vjp(
        &self,
        u: &Array2<Complex64>,
        kernel_grad: &Array2<f64>,
    ) -> Vec<f64> {
        let g = self.window.unbin(kernel_grad);
        // dI_s/dT_c = 2 Re(conj(U_s) V_cs) / E0
        let weighted = ndarray::Zip::from(u)
            .and(&g)
            .map_collect(|u, &g| u.conj() * (2.0 * g / self.open_energy));
        self.fields
            .iter()
            .map(|v| {
                ndarray::Zip::from(&weighted)
                    .and(v)
                    .fold(0.0, |acc, w, v| acc + (w * v).re)
            })
            .collect()
    }

    fn check_against(&self, cca: &CodedAperture, band: usize) -> Result<()> {
        if cca.n() != self.n {
            return Err(Error::Consistency(format!(
                "basis built for {0}x{0} cells, aperture has {1}x{1}",
                self.n,
                cca.n()
            )));
        }
        let lambda = cca.wavelength(band)?;
        if (lambda - self.wavelength).abs() > 1e-9 * self.wavelength {
            return Err(Error::Consistency(format!(
                "basis propagated at {} m, band {band} is {lambda} m",
                self.wavelength
            )));
        }
        Ok(())
    }
}

/// Kernel together with its Jacobian with respect to the aperture weights.
#[derive(Debug, Clone)]
pub struct PsfJacobian {
    pub kernel: Array2<f64>,
    /// `[cell, r, row, col]`: derivative of each kernel pixel by `w[cell, r]`.
    pub grad: Array4<f64>,
}

/// PSF of `cca` in band `band` from its basis decomposition, with the full
/// derivative `dPSF/dw[i, j, r] = 2 alpha_band^r Re(conj(U) V_ij)`, binned and
/// cropped like the kernel itself.
pub fn psf_and_gradient(
    basis: &BasisFieldSet,
    cca: &CodedAperture,
    band: usize,
) -> Result<PsfJacobian> {
    basis.check_against(cca, band)?;
    let t = cca.cell_transmittances(band)?;
    let (kernel, u) = basis.psf(&t);
    let k = basis.window.crop;
    let r_count = cca.num_primaries();
    let mut grad = Array4::zeros((t.len(), r_count, k, k));
    let scale = 2.0 / basis.open_energy;
    for (cell, v) in basis.fields.iter().enumerate() {
        let d_intensity = ndarray::Zip::from(&u)
            .and(v)
            .map_collect(|u, v| scale * (u.conj() * v).re);
        let d_kernel = basis.window.bin_intensity(&d_intensity);
        for r in 0..r_count {
            let alpha = cca.primaries[[r, band]];
            grad.slice_mut(ndarray::s![cell, r, .., ..])
                .assign(&(&d_kernel * alpha));
        }
    }
    Ok(PsfJacobian { kernel, grad })
}

/// Basis fields for every `(depth, band)` pair of a configuration.
#[derive(Debug, Clone)]
pub struct BasisBank {
    sets: Vec<BasisFieldSet>,
    num_bands: usize,
    pub n: usize,
    pub config_hash: u64,
    pub wavelengths: Vec<f64>,
    pub depths: Vec<f64>,
}

impl BasisBank {
    pub fn build(cfg: &OpticalConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let cells = CellMap::new(cfg, n)?;
        let pairs: Vec<(f64, f64)> = cfg
            .depth_planes
            .iter()
            .flat_map(|&z| cfg.wavelengths.iter().map(move |&l| (l, z)))
            .collect();
        let sets = pairs
            .par_iter()
            .map(|&(lambda, z)| basis_fields(cfg, &cells, lambda, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sets,
            num_bands: cfg.num_wavelengths(),
            n,
            config_hash: cfg.hash(),
            wavelengths: cfg.wavelengths.clone(),
            depths: cfg.depth_planes.clone(),
        })
    }

    pub fn set(&self, depth: usize, band: usize) -> &BasisFieldSet {
        &self.sets[depth * self.num_bands + band]
    }

    pub fn crop(&self) -> usize {
        self.sets[0].window.crop
    }

    pub fn ensure_matches(&self, cfg: &OpticalConfig) -> Result<()> {
        if self.config_hash != cfg.hash() {
            return Err(Error::Consistency(
                "basis fields were computed for a different optical configuration".into(),
            ));
        }
        Ok(())
    }

    fn check_aperture(&self, cca: &CodedAperture) -> Result<()> {
        if cca.n() != self.n {
            return Err(Error::Consistency(format!(
                "basis built for {0}x{0} cells, aperture has {1}x{1}",
                self.n,
                cca.n()
            )));
        }
        if cca.num_bands() != self.num_bands {
            return Err(Error::Consistency(format!(
                "aperture has {} bands, basis has {}",
                cca.num_bands(),
                self.num_bands
            )));
        }
        for (band, &lambda) in self.wavelengths.iter().enumerate() {
            self.sets[band].check_against(cca, band).map_err(|_| {
                Error::Consistency(format!("band {band} of the aperture is not at {lambda} m"))
            })?;
        }
        Ok(())
    }

    /// PSF stack of `cca` via the quadratic form.
    pub fn psf_stack(&self, cca: &CodedAperture) -> Result<PsfStack> {
        self.check_aperture(cca)?;
        let (j_count, l_count, k) = (self.depths.len(), self.num_bands, self.crop());
        let transmittances: Vec<Vec<f64>> = (0..l_count)
            .map(|l| cca.cell_transmittances(l))
            .collect::<Result<_>>()?;
        let mut kernels = Array4::zeros((j_count, l_count, k, k));
        for j in 0..j_count {
            for l in 0..l_count {
                let (kernel, _) = self.set(j, l).psf(&transmittances[l]);
                kernels.slice_mut(ndarray::s![j, l, .., ..]).assign(&kernel);
            }
        }
        PsfStack::new(
            self.wavelengths.clone(),
            self.depths.clone(),
            kernels,
            self.config_hash ^ crate::optics::hash_text(&cca.to_text()),
        )
    }

    /// Gradient of a loss with respect to the aperture weights, given its
    /// gradient with respect to every kernel of the stack (`[J, L, K, K]`).
    pub fn weight_vjp(&self, cca: &CodedAperture, kernel_grad: &Array4<f64>) -> Result<Array3<f64>> {
        self.check_aperture(cca)?;
        let (j_count, l_count, k) = (self.depths.len(), self.num_bands, self.crop());
        if kernel_grad.dim() != (j_count, l_count, k, k) {
            return Err(Error::Shape(format!(
                "kernel gradient {:?} vs stack ({j_count}, {l_count}, {k}, {k})",
                kernel_grad.dim()
            )));
        }
        let n = self.n;
        let r_count = cca.num_primaries();
        let mut d_t = vec![vec![0.0; n * n]; l_count];
        for l in 0..l_count {
            let t = cca.cell_transmittances(l)?;
            for j in 0..j_count {
                let g = kernel_grad.slice(ndarray::s![j, l, .., ..]).to_owned();
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let set = self.set(j, l);
                let u = set.sensor_field(&t);
                for (acc, v) in d_t[l].iter_mut().zip(set.transmittance_vjp(&u, &g)) {
                    *acc += v;
                }
            }
        }
        let mut grad = Array3::zeros((n, n, r_count));
        for cell in 0..n * n {
            for r in 0..r_count {
                grad[[cell / n, cell % n, r]] = (0..l_count)
                    .map(|l| cca.primaries[[r, l]] * d_t[l][cell])
                    .sum();
            }
        }
        Ok(grad)
    }
}
