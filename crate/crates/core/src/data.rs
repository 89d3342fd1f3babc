//! Spectral-depth scene container (`SDC1`), a synthetic scene generator and
//! measured-PSF ingestion.
//!
//! `SDC1` layout (little-endian): magic, `u32` H, W, L, flags (bit 0: depth
//! present), L `f64` wavelengths in meters, H*W*L `f32` radiance (band-major,
//! then row-major), then H*W `f32` depths in meters when flagged.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::binio::{checked_u32, put_f32s, put_f64s, put_u32, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::optics::RawPsf;
use crate::optics::{OpticalConfig, PsfStack};
use crate::render::{DepthMap, SpectralCube};
use crate::rng::Xoshiro256;

pub const SDC_MAGIC: &[u8; 4] = b"SDC1";
const FLAG_DEPTH: u32 = 1;

/// A scene as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cube: SpectralCube,
    pub depth: DepthMap,
}

pub fn sdc_to_bytes(cube: &SpectralCube, depth: Option<&DepthMap>) -> Result<Vec<u8>> {
    let (h, w, l) = cube.dim();
    if let Some(d) = depth {
        if d.dim() != (h, w) {
            return Err(Error::Shape(format!("depth {:?} vs cube {h}x{w}", d.dim())));
        }
    }
    check_increasing(&cube.wavelengths).map_err(|m| Error::Domain(m))?;
    let mut out = Vec::with_capacity(20 + 8 * l + 4 * h * w * (l + 1));
    out.extend_from_slice(SDC_MAGIC);
    put_u32(&mut out, checked_u32(h, "H")?);
    put_u32(&mut out, checked_u32(w, "W")?);
    put_u32(&mut out, checked_u32(l, "L")?);
    put_u32(&mut out, if depth.is_some() { FLAG_DEPTH } else { 0 });
    put_f64s(&mut out, &cube.wavelengths);
    let band_major = cube.values.view().permuted_axes([2, 0, 1]);
    put_f32s(&mut out, band_major.iter().map(|&v| v as f32));
    if let Some(d) = depth {
        put_f32s(&mut out, d.values.iter().map(|&v| v as f32));
    }
    Ok(out)
}

pub fn sdc_from_bytes(bytes: &[u8]) -> Result<(SpectralCube, Option<DepthMap>)> {
    let mut r = ByteReader::new("SDC1", bytes);
    r.magic(SDC_MAGIC)?;
    let h = r.u32("H")? as usize;
    let w = r.u32("W")? as usize;
    let l = r.u32("L")? as usize;
    let flags = r.u32("flags")?;
    if flags & !FLAG_DEPTH != 0 {
        return Err(Error::parse("SDC1", format!("unknown flag bits {flags:#x}")));
    }
    let wavelengths = r.f64s(l, "wavelengths")?;
    check_increasing(&wavelengths).map_err(|m| Error::parse("SDC1", format!("wavelengths: {m}")))?;
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| Error::parse("SDC1", "declared cube size overflows"))?;
    let cube = r.f32s(count, "cube payload")?;
    let values = Array3::from_shape_vec((l, h, w), cube.into_iter().map(f64::from).collect())
        .expect("sized by header")
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .to_owned();
    let depth = if flags & FLAG_DEPTH != 0 {
        let d = r.f32s(h * w, "depth payload")?;
        let d = Array2::from_shape_vec((h, w), d.into_iter().map(f64::from).collect()).expect("sized");
        Some(DepthMap::new(d).map_err(|e| Error::parse("SDC1", format!("depth payload: {e}")))?)
    } else {
        None
    };
    r.finish()?;
    let cube = SpectralCube::new(values, wavelengths)
        .map_err(|e| Error::parse("SDC1", format!("cube payload: {e}")))?;
    Ok((cube, depth))
}

fn check_increasing(wl: &[f64]) -> std::result::Result<(), String> {
    if wl.iter().any(|v| !v.is_finite()) {
        return Err("non-finite wavelength".into());
    }
    if let Some(i) = wl.windows(2).position(|p| p[1] <= p[0]) {
        return Err(format!("not strictly increasing at index {}", i + 1));
    }
    Ok(())
}

pub fn write_sdc(path: &Path, cube: &SpectralCube, depth: Option<&DepthMap>) -> Result<()> {
    write_atomic(path, &sdc_to_bytes(cube, depth)?)
}

pub fn read_sdc(path: &Path) -> Result<(SpectralCube, Option<DepthMap>)> {
    sdc_from_bytes(&read_file(path)?)
}

/// `.sdc` files of `dir` in lexicographic order.
pub fn list_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "sdc") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads every scene of `dir`; each must carry a depth plane.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    list_scenes(dir)?
        .into_iter()
        .map(|p| {
            let (cube, depth) = read_sdc(&p)?;
            let depth = depth.ok_or_else(|| {
                Error::parse("SDC1", format!("{} has no depth plane", p.display()))
            })?;
            Ok(Scene { cube, depth })
        })
        .collect()
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.sdc")
}

// ---------------------------------------------------------------------------
// Synthetic scenes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    SmoothNoise,
    Checker,
    Mixed,
}

impl std::str::FromStr for Texture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth-noise" => Ok(Texture::SmoothNoise),
            "checker" => Ok(Texture::Checker),
            "mixed" => Ok(Texture::Mixed),
            _ => Err(Error::Config(format!(
                "texture must be smooth-noise, checker or mixed, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for Texture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Texture::SmoothNoise => "smooth-noise",
            Texture::Checker => "checker",
            Texture::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Number of distinct depth planes per scene.
    pub planes: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub texture: Texture,
    /// Chance of an extra small patch in front of the layout.
    pub occluder_prob: f64,
}

pub const SCENE_KEYS: &[&str] = &[
    "height",
    "width",
    "planes",
    "z_min",
    "z_max",
    "texture",
    "occluder_prob",
];

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            planes: 3,
            z_min: 0.4,
            z_max: 1.6,
            texture: Texture::Mixed,
            occluder_prob: 0.3,
        }
    }
}

impl SceneSpec {
    /// Depth planes of `cfg` that lie inside `[z_min, z_max]`, farthest first.
    pub fn candidate_depths(&self, cfg: &OpticalConfig) -> Vec<f64> {
        let tol = 1e-9;
        let mut c: Vec<f64> = cfg
            .depth_planes
            .iter()
            .copied()
            .filter(|&z| z >= self.z_min * (1.0 - tol) && z <= self.z_max * (1.0 + tol))
            .collect();
        c.sort_by(|a, b| b.total_cmp(a));
        c
    }

    pub fn validate(&self, cfg: &OpticalConfig) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene size must be positive".into()));
        }
        if !(self.z_min > 0.0 && self.z_min < self.z_max) {
            return Err(Error::Config(format!(
                "scene depth range [{}, {}] is invalid",
                self.z_min, self.z_max
            )));
        }
        let tol = 1e-9;
        if self.z_min < cfg.min_depth() * (1.0 - tol) || self.z_max > cfg.max_depth() * (1.0 + tol) {
            return Err(Error::Config(format!(
                "scene depth range [{}, {}] exceeds the configured planes [{}, {}]",
                self.z_min,
                self.z_max,
                cfg.min_depth(),
                cfg.max_depth()
            )));
        }
        let available = self.candidate_depths(cfg).len();
        if self.planes == 0 || self.planes > available {
            return Err(Error::Config(format!(
                "planes = {} but {available} configured depths lie in the scene range",
                self.planes
            )));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(Error::Config("occluder_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("planes", self.planes);
        kv.set("z_min", format!("{:?}", self.z_min));
        kv.set("z_max", format!("{:?}", self.z_max));
        kv.set("texture", self.texture);
        kv.set("occluder_prob", format!("{:?}", self.occluder_prob));
        kv
    }

    /// Reads the scene keys of `kv`, keeping defaults for absent ones.
    pub fn from_kv(kv: &KvMap, seed: u64) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            seed,
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            planes: kv.get_or("planes", d.planes)?,
            z_min: kv.get_or("z_min", d.z_min)?,
            z_max: kv.get_or("z_max", d.z_max)?,
            texture: kv.get_or("texture", d.texture)?,
            occluder_prob: kv.get_or("occluder_prob", d.occluder_prob)?,
        })
    }
}

/// Smooth synthetic reflectance curves (foliage-like, red, blue, neutral)
/// evaluated at `nm`. All lie in `[0, 1]`.
pub fn endmember(index: usize, nm: f64) -> f64 {
    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    let gauss = |c: f64, s: f64| (-0.5 * ((nm - c) / s).powi(2)).exp();
    match index {
        0 => 0.05 + 0.4 * gauss(550.0, 35.0) + 0.5 * logistic((nm - 690.0) / 15.0),
        1 => 0.08 + 0.82 * logistic((nm - 595.0) / 20.0),
        2 => 0.06 + 0.74 * logistic((485.0 - nm) / 22.0),
        _ => 0.55 + 0.15 * ((nm - 550.0) / 150.0),
    }
}

const ENDMEMBERS: usize = 4;

/// Value noise on a grid of `cell`-pixel squares, bilinearly interpolated, in `[0, 1]`.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut Xoshiro256) -> Array2<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.next_f64());
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f64 / cell as f64;
        let fx = x as f64 / cell as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = grid[[y0, x0]] * (1.0 - tx) + grid[[y0, x0 + 1]] * tx;
        let bottom = grid[[y0 + 1, x0]] * (1.0 - tx) + grid[[y0 + 1, x0 + 1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

fn texture_map(kind: Texture, h: usize, w: usize, rng: &mut Xoshiro256) -> Array2<f64> {
    let kind = match kind {
        Texture::Mixed if rng.next_f64() < 0.5 => Texture::SmoothNoise,
        Texture::Mixed => Texture::Checker,
        k => k,
    };
    match kind {
        Texture::Checker => {
            let period = 2 + rng.below(6);
            let lo = 0.1 + 0.3 * rng.next_f64();
            let hi = 0.6 + 0.4 * rng.next_f64();
            let (oy, ox) = (rng.below(period), rng.below(period));
            Array2::from_shape_fn((h, w), |(y, x)| {
                if ((y + oy) / period + (x + ox) / period) % 2 == 0 {
                    hi
                } else {
                    lo
                }
            })
        }
        _ => {
            let coarse = value_noise(h, w, 8, rng);
            let fine = value_noise(h, w, 2, rng);
            (coarse * 0.5 + fine * 0.5).mapv(|v| 0.05 + 0.95 * v)
        }
    }
}

fn random_convex(rng: &mut Xoshiro256) -> [f64; ENDMEMBERS] {
    let mut w = [0.0; ENDMEMBERS];
    for v in &mut w {
        *v = -(1.0 - rng.next_f64()).ln();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Axis-aligned rectangle `(top, left, height, width)` covering `frac` of each side.
fn random_rect(h: usize, w: usize, lo: f64, hi: f64, rng: &mut Xoshiro256) -> (usize, usize, usize, usize) {
    let rh = ((lo + (hi - lo) * rng.next_f64()) * h as f64).round().max(1.0) as usize;
    let rw = ((lo + (hi - lo) * rng.next_f64()) * w as f64).round().max(1.0) as usize;
    let (rh, rw) = (rh.min(h), rw.min(w));
    (rng.below(h - rh + 1), rng.below(w - rw + 1), rh, rw)
}

/// Fronto-parallel textured planes at distinct configured depths.
///
/// The farthest plane fills the frame; nearer planes are rectangles painted
/// far to near. Each plane's spectrum is a spatially varying convex mixture
/// of the four [`endmember`] curves scaled by its texture.
pub fn generate_scene(spec: &SceneSpec, cfg: &OpticalConfig) -> Result<Scene> {
    spec.validate(cfg)?;
    let mut rng = Xoshiro256::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let nm: Vec<f64> = cfg.wavelengths.iter().map(|l| l * 1e9).collect();
    let basis: Vec<Vec<f64>> = (0..ENDMEMBERS)
        .map(|k| nm.iter().map(|&x| endmember(k, x)).collect())
        .collect();

    let mut candidates = spec.candidate_depths(cfg);
    rng.shuffle(&mut candidates);
    let mut depths: Vec<f64> = candidates[..spec.planes].to_vec();
    depths.sort_by(|a, b| b.total_cmp(a));

    let mut cube = Array3::zeros((h, w, nm.len()));
    let mut depth = Array2::zeros((h, w));
    let mut paint = |z: f64, rect: (usize, usize, usize, usize), rng: &mut Xoshiro256| {
        let tex = texture_map(spec.texture, h, w, rng);
        let a = random_convex(rng);
        let b = random_convex(rng);
        let blend = value_noise(h, w, 16, rng);
        let (top, left, rh, rw) = rect;
        for y in top..top + rh {
            for x in left..left + rw {
                let t = blend[[y, x]];
                depth[[y, x]] = z;
                for (l, _) in nm.iter().enumerate() {
                    let s: f64 = (0..ENDMEMBERS)
                        .map(|k| ((1.0 - t) * a[k] + t * b[k]) * basis[k][l])
                        .sum();
                    cube[[y, x, l]] = (tex[[y, x]] * s).clamp(0.0, 1.0);
                }
            }
        }
    };
    paint(depths[0], (0, 0, h, w), &mut rng);
    for &z in &depths[1..] {
        let rect = random_rect(h, w, 0.3, 0.7, &mut rng);
        paint(z, rect, &mut rng);
    }
    if rng.next_f64() < spec.occluder_prob {
        let z = depths[rng.below(depths.len())];
        let rect = random_rect(h, w, 0.1, 0.25, &mut rng);
        paint(z, rect, &mut rng);
    }
    Ok(Scene {
        cube: SpectralCube::new(cube, cfg.wavelengths.clone())?,
        depth: DepthMap::new(depth)?,
    })
}

/// Scene `index` of a dataset seeded with `seed`.
pub fn generate_indexed(spec: &SceneSpec, cfg: &OpticalConfig, index: usize) -> Result<Scene> {
    let s = SceneSpec {
        seed: Xoshiro256::derive_seed(spec.seed, index as u64),
        ..spec.clone()
    };
    generate_scene(&s, cfg)
}

pub fn generate_dataset(spec: &SceneSpec, cfg: &OpticalConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count).map(|i| generate_indexed(spec, cfg, i)).collect()
}

// ---------------------------------------------------------------------------
// Measured PSFs.

/// Reads a `PSF1` file of measured kernels for `cfg`.
///
/// Negative samples are clamped to zero; a kernel whose sum exceeds
/// `1 + 1e-6` is rescaled to unit sum (a warning is returned). Stored
/// energies are ignored and recomputed.
pub fn load_measured_psfs(path: &Path, cfg: &OpticalConfig) -> Result<(PsfStack, Vec<String>)> {
    measured_from_bytes(&read_file(path)?, cfg)
}

pub fn measured_from_bytes(bytes: &[u8], cfg: &OpticalConfig) -> Result<(PsfStack, Vec<String>)> {
    let raw = RawPsf::parse(bytes)?;
    let (j, l, k, _) = raw.kernels.dim();
    let expected = (cfg.num_depths(), cfg.num_wavelengths(), cfg.psf_crop);
    if (j, l, k) != expected {
        return Err(Error::Shape(format!(
            "measured PSF dimensions (J, L, K): expected {expected:?}, found {:?}",
            (j, l, k)
        )));
    }
    let mut kernels = raw.kernels;
    if kernels.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse("PSF1", "non-finite kernel values"));
    }
    kernels.mapv_inplace(|v| v.max(0.0));
    let mut warnings = Vec::new();
    for a in 0..j {
        for b in 0..l {
            let mut kern = kernels.slice_mut(ndarray::s![a, b, .., ..]);
            let sum = kern.sum();
            if sum > 1.0 + 1e-6 {
                kern /= sum;
                warnings.push(format!(
                    "measured kernel (depth {a}, band {b}) had sum {sum:.6}; rescaled to 1"
                ));
            }
        }
    }
    let stack = PsfStack::new(raw.wavelengths, raw.depths, kernels, 0)?;
    Ok((stack, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn cube(seed: u64, h: usize, w: usize, l: usize) -> SpectralCube {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let wl = (0..l).map(|i| 4e-7 + 1e-8 * i as f64).collect();
        SpectralCube::new(Array3::from_shape_fn((h, w, l), |_| rng.next_f64()), wl).unwrap()
    }

    #[test]
    fn sdc_roundtrip_at_single_precision() {
        let c = cube(1, 5, 7, 3);
        let d = DepthMap::new(Array2::from_shape_fn((5, 7), |(y, x)| 0.5 + 0.1 * (y + x) as f64)).unwrap();
        let bytes = sdc_to_bytes(&c, Some(&d)).unwrap();
        assert_eq!(bytes.len(), 20 + 3 * 8 + 4 * 5 * 7 * 4);
        let (c2, d2) = sdc_from_bytes(&bytes).unwrap();
        for (a, b) in c.values.iter().zip(c2.values.iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*a as f32 as f64, *b);
        }
        assert_eq!(c2.wavelengths, c.wavelengths);
        let d2 = d2.unwrap();
        assert!(d.values.iter().zip(d2.values.iter()).all(|(a, b)| *a as f32 as f64 == *b));
        assert_eq!(sdc_to_bytes(&c2, Some(&d2)).unwrap(), bytes);
    }

    #[test]
    fn sdc_layout_is_band_major() {
        let c = cube(2, 2, 3, 2);
        let bytes = sdc_to_bytes(&c, None).unwrap();
        let base = 20 + 16;
        let at = |i: usize| f32::from_le_bytes(bytes[base + 4 * i..base + 4 * i + 4].try_into().unwrap());
        assert_eq!(at(0), c.values[[0, 0, 0]] as f32);
        assert_eq!(at(1), c.values[[0, 1, 0]] as f32);
        assert_eq!(at(6), c.values[[0, 0, 1]] as f32);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
    }

    #[test]
    fn sdc_without_depth_returns_cube_only() {
        let c = cube(3, 4, 4, 2);
        let (_, d) = sdc_from_bytes(&sdc_to_bytes(&c, None).unwrap()).unwrap();
        assert!(d.is_none());
    }

    #[test]
    fn sdc_rejects_malformed_input() {
        let c = cube(4, 3, 3, 2);
        let bytes = sdc_to_bytes(&c, None).unwrap();
        let err = sdc_from_bytes(&bytes[..bytes.len() - 4]).unwrap_err().to_string();
        assert!(err.contains("truncated cube payload"), "{err}");
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(sdc_from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut swapped = bytes.clone();
        swapped[20..28].copy_from_slice(&5e-7f64.to_le_bytes());
        swapped[28..36].copy_from_slice(&4e-7f64.to_le_bytes());
        assert!(sdc_from_bytes(&swapped).unwrap_err().to_string().contains("wavelengths"));
        let mut extra = bytes;
        extra.extend_from_slice(&[0; 4]);
        assert!(sdc_from_bytes(&extra).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let cfg = OpticalConfig::desk();
        let spec = SceneSpec { seed: 9, ..SceneSpec::default() };
        let a = generate_scene(&spec, &cfg).unwrap();
        assert_eq!(a, generate_scene(&spec, &cfg).unwrap());
        assert_ne!(a, generate_scene(&SceneSpec { seed: 10, ..spec.clone() }, &cfg).unwrap());
        assert!(a.cube.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.depth.values.iter().all(|&z| z >= 0.4 && z <= 1.6));
        assert!(a.depth.values.iter().all(|z| cfg.depth_planes.contains(z)));
        assert_eq!(a.cube.dim(), (64, 64, 11));
    }

    #[test]
    fn single_plane_gives_constant_depth() {
        let cfg = OpticalConfig::desk();
        for seed in 0..5 {
            let spec = SceneSpec { seed, planes: 1, ..SceneSpec::default() };
            let s = generate_scene(&spec, &cfg).unwrap();
            let z0 = s.depth.values[[0, 0]];
            assert!(s.depth.values.iter().all(|&z| z == z0));
        }
    }

    #[test]
    fn dataset_covers_many_depth_labels() {
        let cfg = OpticalConfig::desk();
        let spec = SceneSpec { height: 16, width: 16, ..SceneSpec::default() };
        let scenes = generate_dataset(&spec, &cfg, 100).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for s in &scenes {
            let layers = crate::render::discretize_depth(&s.depth, &cfg);
            seen.extend(layers.labels.iter().copied());
        }
        assert!(seen.len() >= spec.planes, "{seen:?}");
    }

    #[test]
    fn spec_validation() {
        let cfg = OpticalConfig::desk();
        assert!(SceneSpec { planes: 7, ..SceneSpec::default() }.validate(&cfg).is_err());
        assert!(SceneSpec { z_min: 0.2, ..SceneSpec::default() }.validate(&cfg).is_err());
        assert!(SceneSpec { planes: 0, ..SceneSpec::default() }.validate(&cfg).is_err());
        let kv = SceneSpec::default().to_kv();
        assert_eq!(SceneSpec::from_kv(&kv, 0).unwrap(), SceneSpec::default());
    }

    #[test]
    fn endmembers_lie_in_unit_interval() {
        for k in 0..ENDMEMBERS {
            for nm in (380..=720).step_by(5) {
                let v = endmember(k, nm as f64);
                assert!((0.0..=1.0).contains(&v), "{k} {nm} {v}");
            }
        }
    }

    fn tiny_stack(scale: f64) -> PsfStack {
        let cfg = OpticalConfig::tiny();
        let k = cfg.psf_crop;
        let kernels = Array4::from_shape_fn((2, 3, k, k), |(j, l, r, c)| {
            scale * (1 + (j + l + r * c) % 5) as f64 / (6.0 * (k * k) as f64)
        });
        PsfStack::new(cfg.wavelengths.clone(), cfg.depth_planes.clone(), kernels, 0).unwrap()
    }

    #[test]
    fn measured_roundtrip_and_rescale() {
        let cfg = OpticalConfig::tiny();
        let s = tiny_stack(1.0);
        let (back, warnings) = measured_from_bytes(&s.to_bytes().unwrap(), &cfg).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back.kernels, s.kernels);
        assert_eq!(back.to_bytes().unwrap(), s.to_bytes().unwrap());

        let mut hot = tiny_stack(1.0);
        let sum = hot.kernels.slice(ndarray::s![0, 1, .., ..]).sum();
        hot.kernels.slice_mut(ndarray::s![0, 1, .., ..]).mapv_inplace(|v| v * 1.02 / sum);
        hot.kernels[[1, 0, 0, 0]] = -0.001;
        let hot = PsfStack {
            energy: Array2::zeros((2, 3)),
            ..hot
        };
        let (fixed, warnings) = measured_from_bytes(&hot.to_bytes().unwrap(), &cfg).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!((fixed.energy[[0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(fixed.kernels[[1, 0, 0, 0]], 0.0);
    }

    #[test]
    fn measured_dimension_mismatch() {
        let mut cfg = OpticalConfig::tiny();
        cfg.depth_planes = vec![1.6, 1.0, 0.5];
        let err = measured_from_bytes(&tiny_stack(1.0).to_bytes().unwrap(), &cfg).unwrap_err();
        assert!(err.to_string().contains("expected (3, 3, 9), found (2, 3, 9)"), "{err}");
    }
}
