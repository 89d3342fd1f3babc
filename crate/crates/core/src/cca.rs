//! Color-coded aperture: an `N x N` grid of cells, each a weighted mix of `R`
//! fixed primary filter spectra.
//!
//! Cell `(i, j)` transmits `T_ij(l) = sum_r w[i, j, r] * alpha[r, l]` in band `l`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::optics::{CellMap, OpticalConfig};
use crate::render::SensorResponse;
use crate::rng::Xoshiro256;

pub const CCA_MAGIC: &str = "CCA1";

/// Centers (nm) of the default primaries: green, red, blue, cyan.
pub const PRIMARY_CENTERS_NM: [f64; 4] = [540.0, 620.0, 450.0, 490.0];
pub const PRIMARY_PEAK: f64 = 0.9;
pub const PRIMARY_FWHM_NM: f64 = 60.0;

/// Tolerance on the per-cell weight sum after projection.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApertureMode {
    Color,
    Binary,
    /// Unobstructed pupil, transmittance 1 at every wavelength.
    Open,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedAperture {
    /// `[N, N, R]` mixing weights.
    pub weights: Array3<f64>,
    /// `[R, L]` primary transmittance spectra, fixed during training.
    pub primaries: Array2<f64>,
    pub wavelengths_nm: Vec<f64>,
    pub mode: ApertureMode,
}

/// Result of reading a `CCA1` file.
#[derive(Debug, Clone)]
pub struct CcaImport {
    pub aperture: CodedAperture,
    /// Set when some cell violates the projection constraint.
    pub unprojected: bool,
}

fn gaussian(x: f64, center: f64, fwhm: f64) -> f64 {
    let sigma = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    (-0.5 * ((x - center) / sigma).powi(2)).exp()
}

/// Four Gaussian band-pass primaries (green, red, blue, cyan) sampled at
/// `wavelengths_nm`, peak 0.9 and 60 nm FWHM.
pub fn default_primaries(wavelengths_nm: &[f64]) -> Result<Array2<f64>> {
    let mut distinct = wavelengths_nm.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::Config(
            "default primaries need at least 4 distinct wavelengths".into(),
        ));
    }
    Ok(Array2::from_shape_fn(
        (PRIMARY_CENTERS_NM.len(), wavelengths_nm.len()),
        |(r, l)| PRIMARY_PEAK * gaussian(wavelengths_nm[l], PRIMARY_CENTERS_NM[r], PRIMARY_FWHM_NM),
    ))
}

/// Eq.-17 style projection of one cell's weights: divide by the sum, clip to
/// `[0, 1]`, and renormalize if clipping negative entries pushed the sum past 1.
///
/// Cells already in the image of the projection are returned untouched, which
/// makes the map exactly idempotent. Zero-sum cells become opaque.
pub fn project_cell(weights: &mut [f64]) {
    let in_range = weights.iter().all(|w| (0.0..=1.0).contains(w));
    let sum: f64 = weights.iter().sum();
    if in_range && (sum == 0.0 || (sum - 1.0).abs() <= 1e-12) {
        if sum == 0.0 {
            weights.iter_mut().for_each(|w| *w = 0.0);
        }
        return;
    }
    if sum == 0.0 || !sum.is_finite() {
        weights.iter_mut().for_each(|w| *w = 0.0);
        return;
    }
    for w in weights.iter_mut() {
        *w = (*w / sum).clamp(0.0, 1.0);
    }
    let clipped_sum: f64 = weights.iter().sum();
    if clipped_sum > 1.0 + 1e-12 {
        for w in weights.iter_mut() {
            *w /= clipped_sum;
        }
    }
}

impl CodedAperture {
    pub fn new(
        weights: Array3<f64>,
        primaries: Array2<f64>,
        wavelengths_nm: Vec<f64>,
        mode: ApertureMode,
    ) -> Result<Self> {
        let (n, n2, r) = weights.dim();
        if n == 0 || n != n2 {
            return Err(Error::Shape(format!("weights must be N x N x R, got {:?}", weights.dim())));
        }
        if primaries.dim() != (r, wavelengths_nm.len()) {
            return Err(Error::Shape(format!(
                "primaries {:?} vs R = {r}, L = {}",
                primaries.dim(),
                wavelengths_nm.len()
            )));
        }
        if primaries.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Domain("primary spectra must lie in [0, 1]".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("weights must be finite".into()));
        }
        if mode != ApertureMode::Color && (r != 1 || primaries.iter().any(|&a| a != 1.0)) {
            return Err(Error::Config(
                "binary and open apertures use a single flat unit primary".into(),
            ));
        }
        Ok(Self {
            weights,
            primaries,
            wavelengths_nm,
            mode,
        })
    }

    /// Unobstructed pupil.
    pub fn open(wavelengths_nm: Vec<f64>) -> Self {
        let l = wavelengths_nm.len();
        Self::new(
            Array3::ones((1, 1, 1)),
            Array2::ones((1, l)),
            wavelengths_nm,
            ApertureMode::Open,
        )
        .expect("open aperture is valid")
    }

    /// Uniform random weights, projected onto the feasible set.
    pub fn random_color(
        n: usize,
        primaries: Array2<f64>,
        wavelengths_nm: Vec<f64>,
        rng: &mut Xoshiro256,
    ) -> Result<Self> {
        let r = primaries.nrows();
        let weights = Array3::from_shape_fn((n, n, r), |_| rng.next_f64());
        Ok(Self::new(weights, primaries, wavelengths_nm, ApertureMode::Color)?.project_constraint())
    }

    /// Binary code with each cell open with probability one half.
    pub fn random_binary(n: usize, wavelengths_nm: Vec<f64>, rng: &mut Xoshiro256) -> Self {
        let l = wavelengths_nm.len();
        let weights = Array3::from_shape_fn((n, n, 1), |_| if rng.next_f64() < 0.5 { 0.0 } else { 1.0 });
        Self::new(weights, Array2::ones((1, l)), wavelengths_nm, ApertureMode::Binary)
            .expect("binary aperture is valid")
    }

    /// Continuous binary-mode weights in `[0, 1)`, binarized on use.
    pub fn random_binary_relaxed(n: usize, wavelengths_nm: Vec<f64>, rng: &mut Xoshiro256) -> Self {
        let l = wavelengths_nm.len();
        let weights = Array3::from_shape_fn((n, n, 1), |_| rng.next_f64());
        Self::new(weights, Array2::ones((1, l)), wavelengths_nm, ApertureMode::Binary)
            .expect("binary aperture is valid")
    }

    pub fn n(&self) -> usize {
        self.weights.dim().0
    }

    pub fn num_primaries(&self) -> usize {
        self.weights.dim().2
    }

    pub fn num_bands(&self) -> usize {
        self.wavelengths_nm.len()
    }

    /// Wavelength of `band` in meters.
    pub fn wavelength(&self, band: usize) -> Result<f64> {
        self.wavelengths_nm
            .get(band)
            .map(|nm| nm * 1e-9)
            .ok_or_else(|| {
                Error::OutOfRange(format!("band {band} of {}", self.wavelengths_nm.len()))
            })
    }

    pub fn check_wavelengths(&self, wavelengths_m: &[f64]) -> Result<()> {
        let matches = self.wavelengths_nm.len() == wavelengths_m.len()
            && self
                .wavelengths_nm
                .iter()
                .zip(wavelengths_m)
                .all(|(nm, m)| (nm * 1e-9 - m).abs() <= 1e-9 * m);
        if matches {
            Ok(())
        } else {
            Err(Error::Consistency(
                "aperture wavelengths do not match the optical configuration".into(),
            ))
        }
    }

    /// Physical side of one cell for a pupil of diameter `cfg.aperture_diameter`.
    pub fn cell_size(&self, cfg: &OpticalConfig) -> f64 {
        cfg.aperture_diameter / self.n() as f64
    }

    /// Spectral width of one band in nm.
    pub fn band_width(&self) -> f64 {
        let l = self.wavelengths_nm.len();
        if l < 2 {
            1.0
        } else {
            (self.wavelengths_nm[l - 1] - self.wavelengths_nm[0]) / (l - 1) as f64
        }
    }

    /// Row-major per-cell transmittance in `band`.
    pub fn cell_transmittances(&self, band: usize) -> Result<Vec<f64>> {
        if band >= self.num_bands() {
            return Err(Error::OutOfRange(format!(
                "band {band} of {}",
                self.num_bands()
            )));
        }
        let n = self.n();
        let r_count = self.num_primaries();
        Ok((0..n * n)
            .map(|cell| {
                (0..r_count)
                    .map(|r| self.weights[[cell / n, cell % n, r]] * self.primaries[[r, band]])
                    .sum::<f64>()
            })
            .collect())
    }

    /// `N x N` transmittance map in `band`.
    pub fn transmittance(&self, band: usize) -> Result<Array2<f64>> {
        let n = self.n();
        Ok(Array2::from_shape_vec((n, n), self.cell_transmittances(band)?)
            .expect("N*N values"))
    }

    /// Nearest-cell upsampling of the band-`band` transmittance onto the
    /// simulation grid; samples outside the code's extent are clear.
    pub fn rasterize(&self, cfg: &OpticalConfig, band: usize) -> Result<Array2<f64>> {
        let cells = CellMap::new(cfg, self.n())?;
        Ok(cells.expand(&self.cell_transmittances(band)?, 1.0))
    }

    /// Applies the manufacturability constraint cell by cell.
    ///
    /// Binary codes have one primary, where normalizing by the sum would send
    /// every positive weight to 1; they are only clipped to `[0, 1]`.
    pub fn project_constraint(&self) -> Self {
        let mut out = self.clone();
        let (n, _, r) = out.weights.dim();
        for i in 0..n {
            for j in 0..n {
                let mut cell: Vec<f64> = (0..r).map(|k| out.weights[[i, j, k]]).collect();
                if self.mode == ApertureMode::Color {
                    project_cell(&mut cell);
                } else {
                    cell.iter_mut().for_each(|w| *w = w.clamp(0.0, 1.0));
                }
                for (k, v) in cell.into_iter().enumerate() {
                    out.weights[[i, j, k]] = v;
                }
            }
        }
        out
    }

    /// True when every weight lies in `[0, 1]` and every cell sums to at most `1 + tol`.
    pub fn is_feasible(&self, tol: f64) -> bool {
        let (n, _, r) = self.weights.dim();
        (0..n).all(|i| {
            (0..n).all(|j| {
                let cell = (0..r).map(|k| self.weights[[i, j, k]]);
                cell.clone().all(|w| (0.0..=1.0).contains(&w)) && cell.sum::<f64>() <= 1.0 + tol
            })
        })
    }

    /// Hard threshold at 0.5 (ties open) for binary codes. Training pairs the
    /// forward pass on the thresholded code with an identity backward pass.
    pub fn binarize(&self) -> Result<Self> {
        if self.mode != ApertureMode::Binary {
            return Err(Error::Config(format!(
                "binarize requires a binary aperture, got {:?}",
                self.mode
            )));
        }
        let mut out = self.clone();
        out.weights.mapv_inplace(|w| if w >= 0.5 { 1.0 } else { 0.0 });
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let (n, _, r) = self.weights.dim();
        let mut out = String::new();
        let join = |vals: &mut dyn Iterator<Item = f64>| {
            vals.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(out, "{CCA_MAGIC} {n} {r} {}", self.num_bands());
        let _ = writeln!(out, "{}", join(&mut self.wavelengths_nm.iter().copied()));
        for row in self.primaries.rows() {
            let _ = writeln!(out, "{}", join(&mut row.iter().copied()));
        }
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(out, "{}", join(&mut (0..r).map(|k| self.weights[[i, j, k]])));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<CcaImport> {
        let err = |line: usize, msg: String| Error::parse("CCA1", format!("line {line}: {msg}"));
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, hcontent) = lines
            .next()
            .ok_or_else(|| Error::parse("CCA1", "empty file"))?;
        let head: Vec<&str> = hcontent.split_whitespace().collect();
        if head.len() != 4 || head[0] != CCA_MAGIC {
            return Err(err(hline, "expected header `CCA1 N R L`".into()));
        }
        let dims = head[1..]
            .iter()
            .map(|t| t.parse::<usize>().map_err(|_| err(hline, format!("bad size `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let (n, r, l) = (dims[0], dims[1], dims[2]);
        if n == 0 || r == 0 || l == 0 {
            return Err(err(hline, "sizes must be positive".into()));
        }

        let mut next_numbers = |expected: usize, what: &str| -> Result<(usize, Vec<f64>)> {
            let (line, content) = lines
                .next()
                .ok_or_else(|| Error::parse("CCA1", format!("missing {what}")))?;
            let values = content
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| err(line, format!("bad number `{tok}` in {what}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != expected {
                return Err(err(
                    line,
                    format!("{what}: expected {expected} values, found {}", values.len()),
                ));
            }
            Ok((line, values))
        };

        let (_, wavelengths_nm) = next_numbers(l, "wavelengths")?;
        let mut primaries = Array2::zeros((r, l));
        for k in 0..r {
            let (line, row) = next_numbers(l, &format!("primary {k}"))?;
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(err(line, format!("primary {k} leaves [0, 1]")));
            }
            primaries.row_mut(k).assign(&ndarray::Array1::from(row));
        }
        let mut weights = Array3::zeros((n, n, r));
        for cell in 0..n * n {
            let (line, row) = next_numbers(r, &format!("cell {cell} weights"))?;
            if row.iter().any(|w| !w.is_finite()) {
                return Err(err(line, "non-finite weight".into()));
            }
            for (k, w) in row.into_iter().enumerate() {
                weights[[cell / n, cell % n, k]] = w;
            }
        }
        if let Some((line, _)) = lines.next() {
            return Err(err(line, "unexpected content after the last cell".into()));
        }

        let flat_unit = r == 1 && primaries.iter().all(|&a| a == 1.0);
        let mode = if flat_unit && n == 1 && weights[[0, 0, 0]] == 1.0 {
            ApertureMode::Open
        } else if flat_unit {
            ApertureMode::Binary
        } else {
            ApertureMode::Color
        };
        let aperture = Self::new(weights, primaries, wavelengths_nm, mode)
            .map_err(|e| Error::parse("CCA1", e.to_string()))?;
        let unprojected = !aperture.is_feasible(SUM_TOLERANCE);
        Ok(CcaImport {
            aperture,
            unprojected,
        })
    }

    /// Color preview of the code as seen through the default RGB sensor,
    /// `px` pixels per cell, pupil outline applied. Not colorimetrically calibrated.
    pub fn preview(&self, px: usize) -> RgbImage {
        let n = self.n();
        let wavelengths: Vec<f64> = self.wavelengths_nm.iter().map(|w| w * 1e-9).collect();
        let response = SensorResponse::default_for(&wavelengths);
        let mut colors = vec![[0.0f64; 3]; n * n];
        for (band, lambda_resp) in (0..self.num_bands()).zip(response.responses.columns()) {
            let t = self.cell_transmittances(band).expect("band in range");
            for (cell, color) in colors.iter_mut().enumerate() {
                for c in 0..3 {
                    color[c] += t[cell] * lambda_resp[c];
                }
            }
        }
        let norm: Vec<f64> = (0..3).map(|c| response.responses.row(c).sum().max(1e-300)).collect();
        let side = n * px;
        let radius = side as f64 / 2.0;
        RgbImage::from_fn(side as u32, side as u32, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - radius, y as f64 + 0.5 - radius);
            if dx * dx + dy * dy >= radius * radius {
                return Rgb([32, 32, 32]);
            }
            let cell = (y as usize / px) * n + x as usize / px;
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                rgb[c] = srgb_encode(colors[cell][c] / norm[c]);
            }
            Rgb(rgb)
        })
    }
}

/// Linear `[0, 1]` value to an 8-bit sRGB code.
pub fn srgb_encode(linear: f64) -> u8 {
    let v = linear.clamp(0.0, 1.0);
    let g = if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    (g * 255.0).round() as u8
}

/// Path of the preview image written next to an exported code.
pub fn preview_path(path: &Path) -> PathBuf {
    path.with_extension("png")
}

/// Writes the `CCA1` text file and an sRGB preview next to it.
pub fn export_cca(cca: &CodedAperture, path: &Path) -> Result<()> {
    write_atomic(path, cca.to_text().as_bytes())?;
    let preview = preview_path(path);
    crate::preview::save_png(&cca.preview(32), &preview)
}

pub fn import_cca(path: &Path) -> Result<CcaImport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CodedAperture::from_text(&text)
}
