//! Layered depth-dependent image formation and RGB sensor integration.
//!
//! Depth planes keep the order of the PSF stack (farthest first by convention);
//! occlusion is resolved by sorting the planes on their metric depth.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use num_complex::Complex64;

use crate::cca::CodedAperture;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::optics::{BasisBank, OpticalConfig, PsfStack};

pub const RGB_CENTERS_NM: [f64; 3] = [610.0, 540.0, 470.0];
pub const RGB_FWHM_NM: f64 = 50.0;

/// `max(v, 0)` that lets NaN through so corrupted inputs are not masked.
fn nonneg(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// `H x W x L` all-in-focus radiance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    pub values: Array3<f64>,
    /// Band centers in meters.
    pub wavelengths: Vec<f64>,
}

impl SpectralCube {
    pub fn new(values: Array3<f64>, wavelengths: Vec<f64>) -> Result<Self> {
        if values.dim().2 != wavelengths.len() {
            return Err(Error::Shape(format!(
                "cube has {} bands, {} wavelengths given",
                values.dim().2,
                wavelengths.len()
            )));
        }
        if values.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Domain("spectral values must be finite and non-negative".into()));
        }
        Ok(Self { values, wavelengths })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn band(&self, l: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![.., .., l])
    }
}

/// Per-pixel metric depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Array2<f64>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("depth values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Binary partition of the image into depth planes.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLayers {
    /// `[J, H, W]`, exactly one 1 per pixel.
    pub masks: Array3<f64>,
    pub labels: Array2<usize>,
}

/// Soft visibility masks, `[J, H, W]`, summing to 1 at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMasks {
    pub masks: Array3<f64>,
}

/// `H x W x 3` sensor image, channels R, G, B.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedImage {
    pub values: Array3<f64>,
}

impl CodedImage {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.dim().2 != 3 {
            return Err(Error::Shape(format!("coded image needs 3 channels, got {}", values.dim().2)));
        }
        if values.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Domain("coded values must be finite and non-negative".into()));
        }
        Ok(Self { values })
    }
}

/// Spectral sensitivities of the three color channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorResponse {
    /// `[3, L]` values in `[0, 1]`.
    pub responses: Array2<f64>,
    /// Band spacing in meters used for the Riemann sum.
    pub band_spacing: f64,
}

fn band_spacing(wavelengths: &[f64]) -> f64 {
    let l = wavelengths.len();
    if l < 2 {
        1.0
    } else {
        (wavelengths[l - 1] - wavelengths[0]) / (l - 1) as f64
    }
}

impl SensorResponse {
    pub fn new(responses: Array2<f64>, band_spacing: f64) -> Result<Self> {
        if responses.nrows() != 3 {
            return Err(Error::Shape(format!("sensor response needs 3 rows, got {}", responses.nrows())));
        }
        if responses.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("sensor responses must lie in [0, 1]".into()));
        }
        if !(band_spacing.is_finite() && band_spacing > 0.0) {
            return Err(Error::Domain(format!("band spacing must be positive, got {band_spacing}")));
        }
        Ok(Self {
            responses,
            band_spacing,
        })
    }

    /// Gaussian R, G, B curves (610/540/470 nm, 50 nm FWHM, peak 1) at `wavelengths` (meters).
    pub fn default_for(wavelengths: &[f64]) -> Self {
        let sigma = RGB_FWHM_NM / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let responses = Array2::from_shape_fn((3, wavelengths.len()), |(c, l)| {
            let d = wavelengths[l] * 1e9 - RGB_CENTERS_NM[c];
            (-0.5 * (d / sigma).powi(2)).exp()
        });
        Self {
            responses,
            band_spacing: band_spacing(wavelengths),
        }
    }

    pub fn for_config(cfg: &OpticalConfig) -> Self {
        Self::default_for(&cfg.wavelengths)
    }

    /// Parses lines of `wavelength_nm r g b` (`#` starts a comment). The
    /// wavelengths must match `wavelengths` (meters) band for band.
    pub fn from_text(text: &str, wavelengths: &[f64]) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let vals = content
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::parse("sensor response", format!("line {}: bad number `{t}`", i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 4 {
                return Err(Error::parse(
                    "sensor response",
                    format!("line {}: expected `wavelength_nm r g b`", i + 1),
                ));
            }
            rows.push((i + 1, vals));
        }
        if rows.len() != wavelengths.len() {
            return Err(Error::parse(
                "sensor response",
                format!("{} rows for {} bands", rows.len(), wavelengths.len()),
            ));
        }
        let mut responses = Array2::zeros((3, wavelengths.len()));
        for (l, (line, vals)) in rows.iter().enumerate() {
            if (vals[0] * 1e-9 - wavelengths[l]).abs() > 1e-6 * wavelengths[l] {
                return Err(Error::parse(
                    "sensor response",
                    format!("line {line}: wavelength {} nm does not match band {l}", vals[0]),
                ));
            }
            for c in 0..3 {
                responses[[c, l]] = vals[c + 1];
            }
        }
        Self::new(responses, band_spacing(wavelengths))
    }

    pub fn num_bands(&self) -> usize {
        self.responses.ncols()
    }

    /// `max_c sum_l R_c(l) * band_spacing`: the channel value of a unit flat spectrum.
    pub fn max_channel_gain(&self) -> f64 {
        self.responses
            .rows()
            .into_iter()
            .map(|r| r.sum() * self.band_spacing)
            .fold(0.0, f64::max)
    }
}

/// Assigns every pixel to the plane nearest in inverse depth; ties go to the
/// nearer plane. Depths outside the plane range are clamped.
pub fn discretize_depth(dm: &DepthMap, cfg: &OpticalConfig) -> DepthLayers {
    discretize_to_planes(dm, &cfg.depth_planes)
}

pub fn discretize_to_planes(dm: &DepthMap, planes: &[f64]) -> DepthLayers {
    let (h, w) = dm.dim();
    let lo = planes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = planes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inv: Vec<f64> = planes.iter().map(|z| 1.0 / z).collect();
    let labels = dm.values.mapv(|z| {
        let q = 1.0 / z.clamp(lo, hi);
        let mut best = 0;
        for j in 1..planes.len() {
            let (d, db) = ((q - inv[j]).abs(), (q - inv[best]).abs());
            let tie = (d - db).abs() <= 1e-12 * q;
            if (d < db && !tie) || (tie && planes[j] < planes[best]) {
                best = j;
            }
        }
        best
    });
    let mut masks = Array3::zeros((planes.len(), h, w));
    for ((r, c), &j) in labels.indexed_iter() {
        masks[[j, r, c]] = 1.0;
    }
    DepthLayers { masks, labels }
}

// ---------------------------------------------------------------------------
// Convolution with edge-replicate padding via zero-padded FFTs.

fn fast_len(n: usize) -> usize {
    (n..)
        .find(|&m| {
            let mut v = m;
            for p in [2, 3, 5] {
                while v % p == 0 {
                    v /= p;
                }
            }
            v == 1
        })
        .expect("unbounded search")
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Fft2>>> = RefCell::new(HashMap::new());
}

fn plan(rows: usize, cols: usize) -> Rc<Fft2> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((rows, cols))
            .or_insert_with(|| Rc::new(Fft2::new(rows, cols)))
            .clone()
    })
}

/// FFT geometry for "same" convolutions of `h x w` images with `k x k` kernels.
struct ConvGeometry {
    h: usize,
    w: usize,
    k: usize,
    fft: Rc<Fft2>,
}

impl ConvGeometry {
    fn new(h: usize, w: usize, k: usize) -> Self {
        let fft = plan(fast_len(h + k - 1), fast_len(w + k - 1));
        Self { h, w, k, fft }
    }

    fn zeros(&self) -> Array2<Complex64> {
        Array2::zeros(self.fft.shape())
    }

    /// Spectrum of the image padded by `k / 2` replicated edge samples.
    fn image_spectrum(&self, img: ArrayView2<f64>) -> Array2<Complex64> {
        let half = (self.k / 2) as i64;
        let mut buf = self.zeros();
        for r in 0..self.h + self.k - 1 {
            let sr = (r as i64 - half).clamp(0, self.h as i64 - 1) as usize;
            for c in 0..self.w + self.k - 1 {
                let sc = (c as i64 - half).clamp(0, self.w as i64 - 1) as usize;
                buf[[r, c]] = Complex64::new(img[[sr, sc]], 0.0);
            }
        }
        self.fft.forward(&mut buf);
        buf
    }

    fn kernel_spectrum(&self, kernel: ArrayView2<f64>) -> Array2<Complex64> {
        let mut buf = self.zeros();
        for ((r, c), &v) in kernel.indexed_iter() {
            buf[[r, c]] = Complex64::new(v, 0.0);
        }
        self.fft.forward(&mut buf);
        buf
    }

    /// Convolution of a (pre-transformed) image with `kernel`; kernels with a
    /// single central tap are applied directly so identity kernels are exact.
    fn convolve_with(
        &self,
        img: ArrayView2<f64>,
        spectrum: &Array2<Complex64>,
        kernel: ArrayView2<f64>,
    ) -> Array2<f64> {
        match center_tap(kernel) {
            Some(v) => img.mapv(|x| x * v),
            None => self.convolve(spectrum, &self.kernel_spectrum(kernel)),
        }
    }

    /// Inverse transform of `a * b`, keeping the `h x w` valid window.
    fn convolve(&self, a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<f64> {
        let mut prod = a * b;
        self.fft.inverse(&mut prod);
        let off = self.k - 1;
        prod.slice(s![off..off + self.h, off..off + self.w]).mapv(|v| v.re)
    }

    /// Gradient of `sum(grad * conv(img, kernel))` with respect to the kernel,
    /// given the padded image spectrum.
    fn kernel_gradient(&self, image: &Array2<Complex64>, grad: ArrayView2<f64>) -> Array2<f64> {
        let off = self.k - 1;
        let mut buf = self.zeros();
        buf.slice_mut(s![off..off + self.h, off..off + self.w])
            .zip_mut_with(&grad, |b, &g| *b = Complex64::new(g, 0.0));
        self.fft.forward(&mut buf);
        buf.zip_mut_with(image, |b, p| *b *= p.conj());
        self.fft.inverse(&mut buf);
        buf.slice(s![..self.k, ..self.k]).mapv(|v| v.re)
    }
}

/// Value of the only nonzero tap when it sits at the kernel center.
fn center_tap(kernel: ArrayView2<f64>) -> Option<f64> {
    let (k, _) = kernel.dim();
    let v = kernel[[k / 2, k / 2]];
    let others_zero = kernel
        .indexed_iter()
        .all(|((r, c), &x)| x == 0.0 || (r == k / 2 && c == k / 2));
    others_zero.then_some(v)
}

/// "Same"-size 2-D convolution with edge-replicate padding; `kernel` must be odd-sized.
pub fn convolve_replicate(img: ArrayView2<f64>, kernel: ArrayView2<f64>) -> Result<Array2<f64>> {
    let k = check_kernel(kernel.dim())?;
    let (h, w) = img.dim();
    let geo = ConvGeometry::new(h, w, k);
    Ok(geo.convolve_with(img, &geo.image_spectrum(img), kernel))
}

fn check_kernel(dim: (usize, usize)) -> Result<usize> {
    if dim.0 != dim.1 || dim.0 % 2 == 0 {
        return Err(Error::Shape(format!("kernels must be square and odd, got {dim:?}")));
    }
    Ok(dim.0)
}

fn check_layers(layers: &DepthLayers, stack: &PsfStack, hw: (usize, usize)) -> Result<()> {
    let (j, h, w) = layers.masks.dim();
    if j != stack.num_depths() {
        return Err(Error::Shape(format!(
            "{j} depth layers for a stack with {} depths",
            stack.num_depths()
        )));
    }
    if (h, w) != hw {
        return Err(Error::Shape(format!("layers are {h}x{w}, image is {}x{}", hw.0, hw.1)));
    }
    Ok(())
}

/// Indices of the stack planes from nearest to farthest.
fn near_to_far(depths: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]));
    order
}

/// Intermediate quantities of the occlusion model, kept for the adjoint.
#[derive(Debug, Clone)]
struct MaskTape {
    blurred: Array3<f64>,
    /// `1 - raw` of the next nearer plane, before clamping at zero.
    occluder: Array3<f64>,
    sum: Array2<f64>,
    masks: Array3<f64>,
}

fn occlusion_forward(layers: &DepthLayers, stack: &PsfStack, geo: &ConvGeometry) -> (MaskTape, Vec<Array2<Complex64>>) {
    let (jn, h, w) = layers.masks.dim();
    let spectra: Vec<Array2<Complex64>> = (0..jn)
        .map(|j| geo.image_spectrum(layers.masks.index_axis(Axis(0), j)))
        .collect();
    let mut blurred = Array3::zeros((jn, h, w));
    for j in 0..jn {
        let mean = stack.mean_kernel(j);
        let b = geo.convolve_with(layers.masks.index_axis(Axis(0), j), &spectra[j], mean.view());
        blurred.index_axis_mut(Axis(0), j).assign(&b);
    }
    let order = near_to_far(&stack.depths);
    let mut raw = Array3::zeros((jn, h, w));
    let mut occluder = Array3::ones((jn, h, w));
    for (t, &j) in order.iter().enumerate() {
        if t > 0 {
            let prev = order[t - 1];
            let occ = raw.index_axis(Axis(0), prev).mapv(|m: f64| 1.0 - m);
            occluder.index_axis_mut(Axis(0), j).assign(&occ);
        }
        let r = &occluder.index_axis(Axis(0), j).mapv(nonneg) * &blurred.index_axis(Axis(0), j);
        raw.index_axis_mut(Axis(0), j).assign(&r);
    }
    let sum = raw.sum_axis(Axis(0));
    let mut masks = Array3::zeros((jn, h, w));
    for j in 0..jn {
        for r in 0..h {
            for c in 0..w {
                let total = sum[[r, c]];
                masks[[j, r, c]] = if total > 0.0 {
                    raw[[j, r, c]] / total
                } else {
                    1.0 / jn as f64
                };
            }
        }
    }
    (
        MaskTape {
            blurred,
            occluder,
            sum,
            masks,
        },
        spectra,
    )
}

/// Soft occlusion masks: each layer blurred by its wavelength-mean PSF,
/// attenuated by the blurred nearer layer, then normalized per pixel.
/// Pixels where every blurred layer vanishes get `1 / J`.
pub fn occlusion_masks(layers: &DepthLayers, stack: &PsfStack) -> Result<OcclusionMasks> {
    let (_, h, w) = layers.masks.dim();
    check_layers(layers, stack, (h, w))?;
    let k = check_kernel((stack.crop(), stack.crop()))?;
    let geo = ConvGeometry::new(h, w, k);
    let (tape, _) = occlusion_forward(layers, stack, &geo);
    Ok(OcclusionMasks { masks: tape.masks })
}

/// Per band, the sum over planes of the band convolved with that plane's PSF,
/// weighted by the plane's occlusion mask.
pub fn render_coded_spectral(
    img: &SpectralCube,
    layers: &DepthLayers,
    masks: &OcclusionMasks,
    stack: &PsfStack,
) -> Result<SpectralCube> {
    let (h, w, l) = img.dim();
    check_layers(layers, stack, (h, w))?;
    if masks.masks.dim() != layers.masks.dim() {
        return Err(Error::Shape("occlusion masks do not match the layers".into()));
    }
    if stack.num_bands() != l {
        return Err(Error::Shape(format!("stack has {} bands, cube {l}", stack.num_bands())));
    }
    let k = check_kernel((stack.crop(), stack.crop()))?;
    let geo = ConvGeometry::new(h, w, k);
    let mut out = Array3::zeros((h, w, l));
    for band in 0..l {
        let spec = geo.image_spectrum(img.band(band));
        let mut acc = Array2::<f64>::zeros((h, w));
        for j in 0..stack.num_depths() {
            let conv = geo.convolve_with(img.band(band), &spec, stack.kernel(j, band));
            acc.zip_mut_with(&(&conv * &masks.masks.index_axis(Axis(0), j)), |a, b| *a += b);
        }
        out.slice_mut(s![.., .., band]).assign(&acc.mapv(nonneg));
    }
    SpectralCube::new(out, img.wavelengths.clone())
}

/// Channel `c` is the band-spacing-weighted sum of the bands under `R_c`.
pub fn sensor_integrate(img: &SpectralCube, resp: &SensorResponse) -> Result<CodedImage> {
    let (h, w, l) = img.dim();
    if resp.num_bands() != l {
        return Err(Error::Shape(format!("response has {} bands, cube {l}", resp.num_bands())));
    }
    let mut out = Array3::zeros((h, w, 3));
    for c in 0..3 {
        let mut ch = out.slice_mut(s![.., .., c]);
        for band in 0..l {
            let weight = resp.responses[[c, band]] * resp.band_spacing;
            ch.scaled_add(weight, &img.band(band));
        }
    }
    out.mapv_inplace(nonneg);
    CodedImage::new(out)
}

/// Adjoint of [`sensor_integrate`]: spectral gradient from a channel gradient.
pub fn sensor_integrate_adjoint(grad: &Array3<f64>, resp: &SensorResponse) -> Array3<f64> {
    let (h, w, _) = grad.dim();
    let l = resp.num_bands();
    let mut out = Array3::zeros((h, w, l));
    for band in 0..l {
        let mut plane = out.slice_mut(s![.., .., band]);
        for c in 0..3 {
            plane.scaled_add(resp.responses[[c, band]] * resp.band_spacing, &grad.slice(s![.., .., c]));
        }
    }
    out
}

/// Everything the backward pass of a rendered scene needs.
pub struct RenderTape {
    geo: ConvGeometry,
    layer_spectra: Vec<Array2<Complex64>>,
    band_spectra: Vec<Array2<Complex64>>,
    /// `[J, L]` list of `H x W` per-plane convolutions.
    convolved: Vec<Array2<f64>>,
    mask_tape: MaskTape,
    num_bands: usize,
    order: Vec<usize>,
    response: SensorResponse,
}

/// Full forward model from a PSF stack: discretize, mask, convolve, integrate.
/// Depth planes are taken from the stack.
pub fn render_with_stack(
    img: &SpectralCube,
    dm: &DepthMap,
    stack: &PsfStack,
    resp: &SensorResponse,
) -> Result<CodedImage> {
    render_forward(img, dm, stack, resp).map(|(out, _)| out)
}

/// Like [`render_with_stack`], also returning the tape for [`RenderTape::kernel_vjp`].
pub fn render_forward(
    img: &SpectralCube,
    dm: &DepthMap,
    stack: &PsfStack,
    resp: &SensorResponse,
) -> Result<(CodedImage, RenderTape)> {
    let (h, w, l) = img.dim();
    if dm.dim() != (h, w) {
        return Err(Error::Shape(format!("depth map {:?} vs image {h}x{w}", dm.dim())));
    }
    if stack.num_bands() != l || resp.num_bands() != l {
        return Err(Error::Shape(format!(
            "bands: cube {l}, stack {}, response {}",
            stack.num_bands(),
            resp.num_bands()
        )));
    }
    let k = check_kernel((stack.crop(), stack.crop()))?;
    let layers = discretize_to_planes(dm, &stack.depths);
    let geo = ConvGeometry::new(h, w, k);
    let (mask_tape, layer_spectra) = occlusion_forward(&layers, stack, &geo);
    let jn = stack.num_depths();
    let mut band_spectra = Vec::with_capacity(l);
    let mut convolved = Vec::with_capacity(jn * l);
    let mut spectral = Array3::zeros((h, w, l));
    for band in 0..l {
        band_spectra.push(geo.image_spectrum(img.band(band)));
    }
    for j in 0..jn {
        let mask = mask_tape.masks.index_axis(Axis(0), j);
        for band in 0..l {
            let conv = geo.convolve_with(img.band(band), &band_spectra[band], stack.kernel(j, band));
            let mut plane = spectral.slice_mut(s![.., .., band]);
            plane.zip_mut_with(&(&conv * &mask), |a, b| *a += b);
            convolved.push(conv);
        }
    }
    spectral.mapv_inplace(nonneg);
    let cube = SpectralCube {
        values: spectral,
        wavelengths: img.wavelengths.clone(),
    };
    let out = sensor_integrate(&cube, resp)?;
    Ok((
        out,
        RenderTape {
            geo,
            layer_spectra,
            band_spectra,
            convolved,
            mask_tape,
            num_bands: l,
            order: near_to_far(&stack.depths),
            response: resp.clone(),
        },
    ))
}

impl RenderTape {
    /// Gradient with respect to every PSF kernel, `[J, L, K, K]`, given the
    /// gradient of a scalar loss with respect to the coded image.
    pub fn kernel_vjp(&self, grad: &Array3<f64>) -> Result<Array4<f64>> {
        let geo = &self.geo;
        if grad.dim() != (geo.h, geo.w, 3) {
            return Err(Error::Shape(format!(
                "gradient {:?} vs coded image {}x{}x3",
                grad.dim(),
                geo.h,
                geo.w
            )));
        }
        let l = self.num_bands;
        let mt = &self.mask_tape;
        let jn = mt.masks.dim().0;
        let g_spec = sensor_integrate_adjoint(grad, &self.response);
        let mut out = Array4::zeros((jn, l, geo.k, geo.k));

        // Direct path through the per-plane convolutions.
        let mut g_masks = Array3::<f64>::zeros(mt.masks.dim());
        for j in 0..jn {
            let mask = mt.masks.index_axis(Axis(0), j);
            for band in 0..l {
                let g_band = g_spec.slice(s![.., .., band]);
                let weighted = &g_band * &mask;
                let dk = geo.kernel_gradient(&self.band_spectra[band], weighted.view());
                out.slice_mut(s![j, band, .., ..]).assign(&dk);
                let conv = &self.convolved[j * l + band];
                g_masks
                    .index_axis_mut(Axis(0), j)
                    .zip_mut_with(&(&g_band * conv), |a, b| *a += b);
            }
        }

        // Through the normalization.
        let (_, h, w) = mt.masks.dim();
        let mut g_raw = Array3::zeros(mt.masks.dim());
        for r in 0..h {
            for c in 0..w {
                let total = mt.sum[[r, c]];
                if total > 0.0 {
                    let dot: f64 = (0..jn).map(|j| g_masks[[j, r, c]] * mt.masks[[j, r, c]]).sum();
                    for j in 0..jn {
                        g_raw[[j, r, c]] = (g_masks[[j, r, c]] - dot) / total;
                    }
                }
            }
        }

        // Through the occlusion recursion, farthest plane first.
        let order = &self.order;
        let mut g_blur = Array3::zeros(mt.masks.dim());
        for t in (0..order.len()).rev() {
            let j = order[t];
            for r in 0..h {
                for c in 0..w {
                    let g = g_raw[[j, r, c]];
                    let occ = mt.occluder[[j, r, c]];
                    g_blur[[j, r, c]] += g * nonneg(occ);
                    if t > 0 && occ > 0.0 {
                        g_raw[[order[t - 1], r, c]] -= g * mt.blurred[[j, r, c]];
                    }
                }
            }
        }

        // Mask blur uses the wavelength-mean kernel.
        for j in 0..jn {
            let dk = geo.kernel_gradient(&self.layer_spectra[j], g_blur.index_axis(Axis(0), j));
            for band in 0..l {
                out.slice_mut(s![j, band, .., ..])
                    .scaled_add(1.0 / l as f64, &dk);
            }
        }
        Ok(out)
    }
}

/// Renders a scene through `cca` with a freshly simulated PSF stack.
pub fn render_pipeline(
    img: &SpectralCube,
    dm: &DepthMap,
    cca: &CodedAperture,
    cfg: &OpticalConfig,
    resp: &SensorResponse,
) -> Result<CodedImage> {
    let (stack, _) = PsfStack::simulate(cfg, cca)?;
    render_with_stack(img, dm, &stack, resp)
}

/// Renders through `cca` using precomputed basis fields and returns the
/// gradient of `sum(grad * output)` with respect to the aperture weights.
pub fn render_pipeline_vjp(
    img: &SpectralCube,
    dm: &DepthMap,
    cca: &CodedAperture,
    bank: &BasisBank,
    resp: &SensorResponse,
    grad: &Array3<f64>,
) -> Result<(CodedImage, Array3<f64>)> {
    let stack = bank.psf_stack(cca)?;
    let (out, tape) = render_forward(img, dm, &stack, resp)?;
    let dk = tape.kernel_vjp(grad)?;
    Ok((out, bank.weight_vjp(cca, &dk)?))
}
