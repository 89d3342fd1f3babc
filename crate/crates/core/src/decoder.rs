//! Three-level encoder-decoder ("mini U-Net") with explicit adjoints.
//!
//! Tensors are `[C, H, W]`. Convolutions are 3x3 with zero padding 1 and run
//! as im2col followed by a matrix product.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand_distr::{Distribution, Normal};

use crate::binio::{checked_u32, put_f64s, put_u32, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::render::{CodedImage, DepthMap};
use crate::rng::Xoshiro256;

pub const DCK_MAGIC: &[u8; 4] = b"DCK1";
const ARCH_TAG: &str = "unet3";

/// Keeps the decoded depth strictly inside the range even when the sigmoid saturates.
const SIGMOID_MARGIN: f64 = 1e-12;

/// Hyper-parameters fixed by the architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub slope: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Constant factor applied to the input image before the first layer.
    pub input_gain: f64,
}

/// One convolution: `[out, in, k, k]` kernel, stride and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub arch: Architecture,
    /// Layers in declaration order (see [`Architecture::layer_specs`]).
    pub layers: Vec<ConvParams>,
}

/// `(name, out, in, kernel, stride)` of every layer.
pub type LayerSpec = (&'static str, usize, usize, usize, usize);

impl Architecture {
    pub fn new(z_min: f64, z_max: f64, input_gain: f64) -> Result<Self> {
        let a = Self {
            in_channels: 3,
            widths: [16, 32, 64],
            slope: 0.1,
            z_min,
            z_max,
            input_gain,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_min.is_finite() && self.z_max.is_finite() && self.z_min < self.z_max) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] is empty",
                self.z_min, self.z_max
            )));
        }
        if !(self.input_gain.is_finite() && self.input_gain > 0.0) {
            return Err(Error::Config(format!("input gain must be positive, got {}", self.input_gain)));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let [a, b, c] = self.widths;
        vec![
            ("enc1a", a, self.in_channels, 3, 1),
            ("enc1b", a, a, 3, 1),
            ("down1", a, a, 3, 2),
            ("enc2a", b, a, 3, 1),
            ("enc2b", b, b, 3, 1),
            ("down2", b, b, 3, 2),
            ("enc3a", c, b, 3, 1),
            ("enc3b", c, c, 3, 1),
            ("down3", c, c, 3, 2),
            ("dec3a", c, 2 * c, 3, 1),
            ("dec3b", c, c, 3, 1),
            ("dec2a", b, c + b, 3, 1),
            ("dec2b", b, b, 3, 1),
            ("dec1a", a, b + a, 3, 1),
            ("dec1b", a, a, 3, 1),
            ("head", 1, a, 1, 1),
        ]
    }

    pub fn descriptor(&self) -> String {
        format!(
            "{ARCH_TAG};in={};widths={},{},{};slope={:?};z_min={:?};z_max={:?};gain={:?}",
            self.in_channels,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.slope,
            self.z_min,
            self.z_max,
            self.input_gain
        )
    }

    pub fn parse(descriptor: &str) -> Result<Self> {
        let err = |m: String| Error::parse("decoder descriptor", m);
        let mut parts = descriptor.split(';');
        if parts.next() != Some(ARCH_TAG) {
            return Err(err(format!("unknown architecture in `{descriptor}`")));
        }
        let mut fields = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| err(format!("bad field `{p}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| err(format!("bad value for `{k}`")))
        };
        let widths: Vec<usize> = get("widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| err(format!("bad width `{w}`"))))
            .collect::<Result<_>>()?;
        if widths.len() != 3 {
            return Err(err("expected three widths".into()));
        }
        let a = Self {
            in_channels: get("in")?.parse().map_err(|_| err("bad `in`".into()))?,
            widths: [widths[0], widths[1], widths[2]],
            slope: num("slope")?,
            z_min: num("z_min")?,
            z_max: num("z_max")?,
            input_gain: num("gain")?,
        };
        a.validate().map_err(|e| err(e.to_string()))?;
        Ok(a)
    }
}

/// He-normal kernels (variance `2 / fan_in`) and zero biases.
pub fn decoder_init(arch: &Architecture, seed: u64) -> DecoderParams {
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let layers = arch
        .layer_specs()
        .into_iter()
        .map(|(_, out, inp, k, stride)| {
            let fan_in = (inp * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            ConvParams {
                weight: Array4::from_shape_fn((out, inp, k, k), |_| normal.sample(&mut rng)),
                bias: Array1::zeros(out),
                stride,
            }
        })
        .collect();
    DecoderParams {
        arch: arch.clone(),
        layers,
    }
}

impl DecoderParams {
    /// Same architecture, every parameter zero.
    pub fn zeros_like(&self) -> DecoderParams {
        DecoderParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams {
                    weight: Array4::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                    stride: l.stride,
                })
                .collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in declaration order (weight, then bias, per layer).
    pub fn tensors(&self) -> Vec<(&[f64], Vec<usize>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((l.weight.as_slice().expect("standard layout"), l.weight.shape().to_vec()));
            out.push((l.bias.as_slice().expect("standard layout"), l.bias.shape().to_vec()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// `self += other` element-wise.
    pub fn add_assign(&mut self, other: &DecoderParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Order-sensitive fingerprint of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (t, _) in self.tensors() {
            for v in t {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3).rotate_left(5);
            }
        }
        h
    }

    pub fn check_matches(&self, arch: &Architecture) -> Result<()> {
        if &self.arch != arch {
            return Err(Error::Consistency(format!(
                "decoder architecture `{}` does not match `{}`",
                self.arch.descriptor(),
                arch.descriptor()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DCK_MAGIC);
        let desc = self.arch.descriptor();
        put_u32(&mut out, checked_u32(desc.len(), "descriptor length")?);
        out.extend_from_slice(desc.as_bytes());
        let tensors = self.tensors();
        put_u32(&mut out, checked_u32(tensors.len(), "tensor count")?);
        for (values, shape) in tensors {
            put_u32(&mut out, checked_u32(shape.len(), "tensor rank")?);
            for d in shape {
                put_u32(&mut out, checked_u32(d, "tensor dimension")?);
            }
            put_f64s(&mut out, values);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("DCK1", bytes);
        let params = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(params)
    }

    pub(crate) fn read_from(r: &mut ByteReader) -> Result<Self> {
        r.magic(DCK_MAGIC)?;
        let len = r.u32("descriptor length")? as usize;
        let desc = std::str::from_utf8(r.take(len, "descriptor")?)
            .map_err(|_| Error::parse("DCK1", "descriptor is not UTF-8"))?;
        let arch = Architecture::parse(desc)?;
        let mut params = decoder_init(&arch, 0).zeros_like();
        let count = r.u32("tensor count")? as usize;
        let expected = 2 * params.layers.len();
        if count != expected {
            return Err(Error::parse("DCK1", format!("expected {expected} tensors, found {count}")));
        }
        let shapes: Vec<Vec<usize>> = params.tensors().into_iter().map(|(_, s)| s).collect();
        for (i, (dst, shape)) in params.tensors_mut().into_iter().zip(shapes).enumerate() {
            let rank = r.u32("tensor rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u32("tensor dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(Error::parse(
                    "DCK1",
                    format!("tensor {i}: expected shape {shape:?}, found {dims:?}"),
                ));
            }
            let values = r.f64s(dst.len(), &format!("tensor {i} values"))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse("DCK1", format!("tensor {i} has non-finite values")));
            }
            dst.copy_from_slice(&values);
        }
        Ok(params)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

// ---------------------------------------------------------------------------
// Layer kernels.

fn out_size(n: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (n + 2 * pad - k) / stride + 1
}

/// `[C * k * k, Ho * Wo]` patch matrix with zero padding `k / 2`.
fn im2col(x: ArrayView3<f64>, k: usize, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_size(h, k, stride), out_size(w, k, stride));
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let mut row = cols.row_mut((ci * k + ki) * k + kj);
                let row = row.as_slice_mut().expect("standard layout");
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize), k: usize, stride: usize) -> Array3<f64> {
    let (c, h, w) = shape;
    let (ho, wo) = (out_size(h, k, stride), out_size(w, k, stride));
    let pad = (k / 2) as isize;
    let mut x = Array3::zeros(shape);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((ci * k + ki) * k + kj);
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            x[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix(p: &ConvParams) -> ndarray::ArrayView2<'_, f64> {
    let (o, i, k, _) = p.weight.dim();
    p.weight
        .view()
        .into_shape_with_order((o, i * k * k))
        .expect("standard layout")
}

fn conv_forward(p: &ConvParams, x: ArrayView3<f64>) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let k = p.weight.dim().2;
    let (ho, wo) = (out_size(h, k, p.stride), out_size(w, k, p.stride));
    let cols = im2col(x, k, p.stride);
    let mut y = weight_matrix(p).dot(&cols);
    for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(&p.bias) {
        row += b;
    }
    let o = y.nrows();
    y.into_shape_with_order((o, ho, wo)).expect("contiguous")
}

/// Accumulates parameter gradients into `g` and returns the input gradient.
fn conv_backward(p: &ConvParams, g: &mut ConvParams, x: ArrayView3<f64>, gy: &Array3<f64>) -> Array3<f64> {
    let k = p.weight.dim().2;
    let (o, ho, wo) = gy.dim();
    let gy = gy.view().into_shape_with_order((o, ho * wo)).expect("contiguous");
    let cols = im2col(x, k, p.stride);
    let gw = gy.dot(&cols.t());
    let mut gw4 = g
        .weight
        .view_mut()
        .into_shape_with_order(gw.dim())
        .expect("standard layout");
    gw4 += &gw;
    g.bias += &gy.sum_axis(Axis(1));
    let gcols = weight_matrix(p).t().dot(&gy);
    col2im(&gcols, x.dim(), k, p.stride)
}

fn leaky(z: &Array3<f64>, slope: f64) -> Array3<f64> {
    z.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Leaky rectifier whose active set is taken from `gate` instead of `z`.
fn leaky_gated(z: &Array3<f64>, gate: &Array3<f64>, slope: f64) -> Array3<f64> {
    let mut out = z.clone();
    ndarray::Zip::from(&mut out).and(gate).for_each(|o, &g| {
        if g <= 0.0 {
            *o *= slope;
        }
    });
    out
}

fn leaky_backward(z: &Array3<f64>, g: &Array3<f64>, slope: f64) -> Array3<f64> {
    let mut out = g.clone();
    ndarray::Zip::from(&mut out).and(z).for_each(|o, &v| {
        if v <= 0.0 {
            *o *= slope;
        }
    });
    out
}

fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

fn upsample2_backward(g: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = g.dim();
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ((ci, y, x), &v) in g.indexed_iter() {
        out[[ci, y / 2, x / 2]] += v;
    }
    out
}

fn concat(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial size")
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    shape: (usize, usize),
    /// Input to each layer, in declaration order.
    inputs: Vec<Array3<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array3<f64>>,
    sig: Array2<f64>,
}

/// Decodes a coded image into a depth map strictly inside `[z_min, z_max]`.
pub fn decoder_forward(params: &DecoderParams, img: &CodedImage) -> Result<(DepthMap, ForwardCache)> {
    forward_impl(params, img, None)
}

/// Evaluates the network with every rectifier's on/off pattern frozen to the
/// one recorded in `gates`. Around the point that produced `gates` this is
/// the same function without its kinks, which keeps finite differences
/// meaningful.
pub fn decoder_forward_gated(params: &DecoderParams, img: &CodedImage, gates: &ForwardCache) -> Result<DepthMap> {
    let (h, w, _) = img.values.dim();
    if gates.shape != (h, w) || gates.pre.len() != params.layers.len() {
        return Err(Error::Consistency("activation pattern does not match the input".into()));
    }
    forward_impl(params, img, Some(&gates.pre)).map(|(d, _)| d)
}

fn forward_impl(
    params: &DecoderParams,
    img: &CodedImage,
    gates: Option<&[Array3<f64>]>,
) -> Result<(DepthMap, ForwardCache)> {
    let (h, w, c) = img.values.dim();
    let arch = &params.arch;
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("decoder input {h}x{w} is not divisible by 8")));
    }
    if c != arch.in_channels {
        return Err(Error::Shape(format!("decoder expects {} channels, got {c}", arch.in_channels)));
    }
    let x0 = img.values.view().permuted_axes([2, 0, 1]).mapv(|v| v * arch.input_gain);
    let mut inputs = Vec::with_capacity(16);
    let mut pre = Vec::with_capacity(16);
    let l = &params.layers;
    let slope = arch.slope;
    let mut run = |idx: usize, x: Array3<f64>, inputs: &mut Vec<Array3<f64>>| -> Array3<f64> {
        let z = conv_forward(&l[idx], x.view());
        inputs.push(x);
        let a = match gates {
            Some(g) => leaky_gated(&z, &g[idx], slope),
            None => leaky(&z, slope),
        };
        pre.push(z);
        a
    };
    let e1 = run(0, x0, &mut inputs);
    let e1 = run(1, e1, &mut inputs);
    let d1 = run(2, e1.clone(), &mut inputs);
    let e2 = run(3, d1, &mut inputs);
    let e2 = run(4, e2, &mut inputs);
    let d2 = run(5, e2.clone(), &mut inputs);
    let e3 = run(6, d2, &mut inputs);
    let e3 = run(7, e3, &mut inputs);
    let d3 = run(8, e3.clone(), &mut inputs);
    let u3 = run(9, concat(&upsample2(&d3), &e3), &mut inputs);
    let u3 = run(10, u3, &mut inputs);
    let u2 = run(11, concat(&upsample2(&u3), &e2), &mut inputs);
    let u2 = run(12, u2, &mut inputs);
    let u1 = run(13, concat(&upsample2(&u2), &e1), &mut inputs);
    let u1 = run(14, u1, &mut inputs);
    let logits = conv_forward(&l[15], u1.view());
    inputs.push(u1);
    let span = arch.z_max - arch.z_min;
    let sig = logits
        .index_axis(Axis(0), 0)
        .mapv(|v| sigmoid(v).clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN));
    let depth = sig.mapv(|s| arch.z_min + span * s);
    pre.push(logits);
    Ok((
        DepthMap::new(depth)?,
        ForwardCache {
            fingerprint: params.fingerprint(),
            shape: (h, w),
            inputs,
            pre,
            sig,
        },
    ))
}

/// Parameter gradients and the `[H, W, 3]` input gradient for an upstream
/// depth gradient.
pub fn decoder_backward(
    params: &DecoderParams,
    cache: &ForwardCache,
    grad_out: &Array2<f64>,
) -> Result<(DecoderParams, Array3<f64>)> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Consistency("forward cache was produced with different parameters".into()));
    }
    if grad_out.dim() != cache.shape {
        return Err(Error::Consistency(format!(
            "gradient {:?} does not match cached output {:?}",
            grad_out.dim(),
            cache.shape
        )));
    }
    let arch = &params.arch;
    let slope = arch.slope;
    let span = arch.z_max - arch.z_min;
    let l = &params.layers;
    let mut grads = params.zeros_like();
    let [wa, wb, wc] = arch.widths;

    let g_logit = (grad_out * &cache.sig.mapv(|s| span * s * (1.0 - s)))
        .insert_axis(Axis(0));
    let mut back = |idx: usize, g_act: &Array3<f64>, is_head: bool| -> Array3<f64> {
        let gz = if is_head {
            g_act.clone()
        } else {
            leaky_backward(&cache.pre[idx], g_act, slope)
        };
        conv_backward(&l[idx], &mut grads.layers[idx], cache.inputs[idx].view(), &gz)
    };
    let g_u1 = back(15, &g_logit, true);
    let g = back(14, &g_u1, false);
    let g_cat1 = back(13, &g, false);
    let mut g_e1 = g_cat1.slice(s![wb.., .., ..]).to_owned();
    let g_u2 = upsample2_backward(&g_cat1.slice(s![..wb, .., ..]).to_owned());
    let g = back(12, &g_u2, false);
    let g_cat2 = back(11, &g, false);
    let mut g_e2 = g_cat2.slice(s![wc.., .., ..]).to_owned();
    let g_u3 = upsample2_backward(&g_cat2.slice(s![..wc, .., ..]).to_owned());
    let g = back(10, &g_u3, false);
    let g_cat3 = back(9, &g, false);
    let mut g_e3 = g_cat3.slice(s![wc.., .., ..]).to_owned();
    let g_d3 = upsample2_backward(&g_cat3.slice(s![..wc, .., ..]).to_owned());
    g_e3 += &back(8, &g_d3, false);
    let g = back(7, &g_e3, false);
    let g_d2 = back(6, &g, false);
    g_e2 += &back(5, &g_d2, false);
    let g = back(4, &g_e2, false);
    let g_d1 = back(3, &g, false);
    g_e1 += &back(2, &g_d1, false);
    let g = back(1, &g_e1, false);
    let g_x0 = back(0, &g, false);
    debug_assert_eq!(g_e1.dim().0, wa);
    let g_in = g_x0.permuted_axes([1, 2, 0]).mapv(|v| v * arch.input_gain);
    Ok((grads, g_in.as_standard_layout().to_owned()))
}
