use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2};
use rayon::prelude::*;

use super::{compute_psf, hash_text, OpticalConfig};
use crate::binio::{checked_u32, put_f64s, put_u32, read_file, write_atomic, ByteReader};
use crate::cca::CodedAperture;
use crate::error::{Error, Result};

pub const PSF_MAGIC: &[u8; 4] = b"PSF1";

/// Depth- and wavelength-dependent PSFs, `[J, L, K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfStack {
    pub wavelengths: Vec<f64>,
    pub depths: Vec<f64>,
    pub kernels: Array4<f64>,
    /// `energy[[j, l]]` is the sum of kernel `(j, l)`.
    pub energy: Array2<f64>,
    /// Identifies the configuration and aperture that produced the stack (0 if unknown).
    pub config_hash: u64,
}

impl PsfStack {
    pub fn new(
        wavelengths: Vec<f64>,
        depths: Vec<f64>,
        kernels: Array4<f64>,
        config_hash: u64,
    ) -> Result<Self> {
        let (j, l, k, k2) = kernels.dim();
        if j != depths.len() || l != wavelengths.len() || k != k2 {
            return Err(Error::Shape(format!(
                "kernels {:?} vs {} depths, {} wavelengths",
                kernels.dim(),
                depths.len(),
                wavelengths.len()
            )));
        }
        if kernels.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Domain("PSF kernels must be finite and non-negative".into()));
        }
        let energy = Array2::from_shape_fn((j, l), |(a, b)| kernels.slice(s![a, b, .., ..]).sum());
        Ok(Self {
            wavelengths,
            depths,
            kernels,
            energy,
            config_hash,
        })
    }

    /// Identity kernels (a single 1 at the center) for every pair.
    pub fn delta(wavelengths: Vec<f64>, depths: Vec<f64>, crop: usize) -> Self {
        let (j, l) = (depths.len(), wavelengths.len());
        let mut kernels = Array4::zeros((j, l, crop, crop));
        kernels
            .slice_mut(s![.., .., crop / 2, crop / 2])
            .fill(1.0);
        Self::new(wavelengths, depths, kernels, 0).expect("delta stack is valid")
    }

    pub fn num_depths(&self) -> usize {
        self.depths.len()
    }

    pub fn num_bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn crop(&self) -> usize {
        self.kernels.dim().2
    }

    pub fn kernel(&self, depth: usize, band: usize) -> ArrayView2<'_, f64> {
        self.kernels.slice(s![depth, band, .., ..])
    }

    /// Wavelength-averaged kernel of depth plane `depth`.
    pub fn mean_kernel(&self, depth: usize) -> Array2<f64> {
        let sum = self
            .kernels
            .slice(s![depth, .., .., ..])
            .sum_axis(ndarray::Axis(0));
        sum / self.num_bands() as f64
    }

    /// Errors unless the stack has the configuration's `J`, `L` and `K`.
    pub fn check_dims(&self, cfg: &OpticalConfig) -> Result<()> {
        let expected = (cfg.num_depths(), cfg.num_wavelengths(), cfg.psf_crop);
        let found = (self.num_depths(), self.num_bands(), self.crop());
        if expected != found {
            return Err(Error::Shape(format!(
                "PSF stack dimensions (J, L, K): expected {expected:?}, found {found:?}"
            )));
        }
        Ok(())
    }

    /// Simulates the stack directly: rasterize the aperture and run the full
    /// wave-optics pipeline for each `(depth, band)`. Returns capture warnings.
    pub fn simulate(cfg: &OpticalConfig, cca: &CodedAperture) -> Result<(Self, Vec<String>)> {
        cfg.validate()?;
        cca.check_wavelengths(&cfg.wavelengths)?;
        let pairs: Vec<(usize, usize)> = (0..cfg.num_depths())
            .flat_map(|j| (0..cfg.num_wavelengths()).map(move |l| (j, l)))
            .collect();
        let rasters: Vec<Array2<f64>> = (0..cfg.num_wavelengths())
            .map(|l| cca.rasterize(cfg, l))
            .collect::<Result<_>>()?;
        let psfs = pairs
            .par_iter()
            .map(|&(j, l)| compute_psf(cfg, &rasters[l], cfg.wavelengths[l], cfg.depth_planes[j]))
            .collect::<Result<Vec<_>>>()?;
        let k = cfg.psf_crop;
        let mut kernels = Array4::zeros((cfg.num_depths(), cfg.num_wavelengths(), k, k));
        let mut warnings = Vec::new();
        for (&(j, l), psf) in pairs.iter().zip(psfs) {
            kernels.slice_mut(s![j, l, .., ..]).assign(&psf.kernel);
            warnings.extend(psf.warning);
        }
        let stack = Self::new(
            cfg.wavelengths.clone(),
            cfg.depth_planes.clone(),
            kernels,
            cfg.hash() ^ hash_text(&cca.to_text()),
        )?;
        Ok((stack, warnings))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 8 * self.kernels.len());
        out.extend_from_slice(PSF_MAGIC);
        put_u32(&mut out, checked_u32(self.num_depths(), "J")?);
        put_u32(&mut out, checked_u32(self.num_bands(), "L")?);
        put_u32(&mut out, checked_u32(self.crop(), "K")?);
        put_f64s(&mut out, &self.wavelengths);
        put_f64s(&mut out, &self.depths);
        put_f64s(&mut out, self.kernels.iter());
        put_f64s(&mut out, self.energy.iter());
        Ok(out)
    }

    /// Parses a `PSF1` container. Stored energies are checked against the kernels.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = RawPsf::parse(bytes)?;
        let stack = Self::new(raw.wavelengths, raw.depths, raw.kernels, 0)
            .map_err(|e| Error::parse("PSF1", e.to_string()))?;
        for (stored, computed) in raw.energy.iter().zip(stack.energy.iter()) {
            if (stored - computed).abs() > 1e-9 * computed.abs().max(1.0) {
                return Err(Error::parse(
                    "PSF1",
                    format!("stored energy {stored} disagrees with kernel sum {computed}"),
                ));
            }
        }
        Ok(Self {
            energy: raw.energy,
            ..stack
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// `PSF1` payload before any validation of kernel values.
pub(crate) struct RawPsf {
    pub wavelengths: Vec<f64>,
    pub depths: Vec<f64>,
    pub kernels: Array4<f64>,
    pub energy: Array2<f64>,
}

impl RawPsf {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new("PSF1", bytes);
        rd.magic(PSF_MAGIC)?;
        let j = rd.u32("J")? as usize;
        let l = rd.u32("L")? as usize;
        let k = rd.u32("K")? as usize;
        let wavelengths = rd.f64s(l, "wavelengths")?;
        let depths = rd.f64s(j, "depths")?;
        let count = j
            .checked_mul(l)
            .and_then(|v| v.checked_mul(k))
            .and_then(|v| v.checked_mul(k))
            .ok_or_else(|| Error::parse("PSF1", "declared kernel count overflows"))?;
        let kernels = rd.f64s(count, "kernel payload")?;
        let energy = rd.f64s(j * l, "energies")?;
        rd.finish()?;
        Ok(Self {
            wavelengths,
            depths,
            kernels: Array4::from_shape_vec((j, l, k, k), kernels).expect("sized by header"),
            energy: Array2::from_shape_vec((j, l), energy).expect("sized by header"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stack() -> PsfStack {
        let kernels = Array4::from_shape_fn((2, 3, 5, 5), |(j, l, r, c)| {
            ((j * 7 + l * 3 + r * 5 + c) % 11) as f64 / 300.0
        });
        PsfStack::new(vec![4.5e-7, 5.5e-7, 6.5e-7], vec![1.5, 0.5], kernels, 0).unwrap()
    }

    #[test]
    fn psf1_layout_is_bit_exact() {
        let stack = sample_stack();
        let bytes = stack.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PSF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 4.5e-7);
        // wavelengths(3) + depths(2) then kernel (0,0,0,0)
        let k0 = 16 + 5 * 8;
        assert_eq!(
            f64::from_le_bytes(bytes[k0..k0 + 8].try_into().unwrap()),
            stack.kernels[[0, 0, 0, 0]]
        );
        // second kernel value in memory order is (0,0,0,1)
        assert_eq!(
            f64::from_le_bytes(bytes[k0 + 8..k0 + 16].try_into().unwrap()),
            stack.kernels[[0, 0, 0, 1]]
        );
        assert_eq!(bytes.len(), 16 + 5 * 8 + 2 * 3 * 25 * 8 + 6 * 8);
        let back = PsfStack::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.kernels, stack.kernels);
    }

    #[test]
    fn psf1_rejects_bad_input() {
        let bytes = sample_stack().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PsfStack::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let short = &bytes[..bytes.len() - 4];
        assert!(PsfStack::from_bytes(short).unwrap_err().to_string().contains("truncated"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(PsfStack::from_bytes(&long).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn delta_stack_energies_are_one() {
        let s = PsfStack::delta(vec![5e-7], vec![2.0, 1.0], 3);
        assert!(s.energy.iter().all(|&e| e == 1.0));
        assert_eq!(s.mean_kernel(1)[[1, 1]], 1.0);
    }

    #[test]
    fn negative_kernels_rejected() {
        let mut k = Array4::zeros((2, 1, 3, 3));
        k[[0, 0, 1, 1]] = -0.1;
        assert!(PsfStack::new(vec![5e-7], vec![2.0, 1.0], k, 0).is_err());
    }
}
