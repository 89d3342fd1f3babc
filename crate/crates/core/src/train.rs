//! Joint optimization of the aperture and the decoder, baselines, evaluation,
//! gradient checking and decoder fine-tuning on measured PSFs.
//!
//! Each batch renders its scenes through the current aperture, decodes them,
//! and back-propagates the mean loss through the decoder, the renderer and the
//! PSF basis decomposition into the aperture weights. Decoder and aperture
//! are updated by separate Adam optimizers; after every aperture update the
//! weights are projected back onto the feasible set.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::{Array2, Array3, Array4};
use rayon::prelude::*;

use crate::binio::{put_block, put_f64s, put_u32, put_u64, read_file, write_atomic, ByteReader};
use crate::cca::{default_primaries, ApertureMode, CodedAperture};
use crate::data::{generate_scene, Scene, SceneSpec, Texture};
use crate::decoder::{
    decoder_backward, decoder_forward, decoder_forward_gated, decoder_init, Architecture, DecoderParams, ForwardCache,
};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{evaluate_metrics, total_loss, LossTerms, LossWeights, MetricsReport};
use crate::optics::{BasisBank, OpticalConfig, PsfStack};
use crate::render::{render_forward, sensor_integrate, CodedImage, SensorResponse};
use crate::rng::Xoshiro256;

pub const CKP_MAGIC: &[u8; 4] = b"CKP1";

/// Which optical layer sits in front of the decoder and whether it learns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No optics: the decoder sees the all-in-focus RGB image.
    Vanilla,
    FixedBca,
    LearnedBca,
    FixedCca,
    LearnedCca,
}

pub const MODES: [Mode; 5] = [
    Mode::Vanilla,
    Mode::FixedBca,
    Mode::LearnedBca,
    Mode::FixedCca,
    Mode::LearnedCca,
];

impl Mode {
    pub fn uses_optics(self) -> bool {
        self != Mode::Vanilla
    }

    pub fn learns_optics(self) -> bool {
        matches!(self, Mode::LearnedBca | Mode::LearnedCca)
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Mode::FixedBca | Mode::LearnedBca)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::FixedBca => "fixed_bca",
            Mode::LearnedBca => "learned_bca",
            Mode::FixedCca => "fixed_cca",
            Mode::LearnedCca => "learned_cca",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MODES.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = MODES.iter().map(|m| m.name()).collect();
            Error::Config(format!("mode must be one of {}, got `{s}`", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_optics: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub loss_weights: LossWeights,
    /// Cells per side of the aperture grid.
    pub cca_cells: usize,
}

pub const TRAIN_KEYS: &[&str] = &[
    "lr_optics",
    "lr_decoder",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "epochs",
    "seed",
    "mode",
    "alpha",
    "mu",
    "sigma",
    "cca_cells",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_optics: 5e-2,
            lr_decoder: 5e-4,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            mode: Mode::LearnedCca,
            loss_weights: LossWeights::default(),
            cca_cells: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_optics.is_finite() && self.lr_optics >= 0.0)
            || !(self.lr_decoder.is_finite() && self.lr_decoder >= 0.0)
        {
            return bad(format!(
                "learning rates must be non-negative, got {} and {}",
                self.lr_optics, self.lr_decoder
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(1..=32).contains(&self.cca_cells) {
            return bad(format!("cca_cells must lie in 1..=32, got {}", self.cca_cells));
        }
        self.loss_weights.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr_optics", format!("{:?}", self.lr_optics));
        kv.set("lr_decoder", format!("{:?}", self.lr_decoder));
        kv.set("beta1", format!("{:?}", self.beta1));
        kv.set("beta2", format!("{:?}", self.beta2));
        kv.set("epsilon", format!("{:?}", self.epsilon));
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("mode", self.mode);
        kv.set("alpha", format!("{:?}", self.loss_weights.alpha));
        kv.set("mu", format!("{:?}", self.loss_weights.mu));
        kv.set("sigma", format!("{:?}", self.loss_weights.sigma));
        kv.set("cca_cells", self.cca_cells);
        kv
    }

    /// Reads the training keys of `kv`, keeping defaults for absent ones.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            lr_optics: kv.get_or("lr_optics", d.lr_optics)?,
            lr_decoder: kv.get_or("lr_decoder", d.lr_decoder)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            epsilon: kv.get_or("epsilon", d.epsilon)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            seed: kv.get_or("seed", d.seed)?,
            mode: kv.get_or("mode", d.mode)?,
            loss_weights: LossWeights {
                alpha: kv.get_or("alpha", d.loss_weights.alpha)?,
                mu: kv.get_or("mu", d.loss_weights.mu)?,
                sigma: kv.get_or("sigma", d.loss_weights.sigma)?,
            },
            cca_cells: kv.get_or("cca_cells", d.cca_cells)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

// ---------------------------------------------------------------------------
// Adam.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moment estimates with the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update; returns the new parameters and state.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
    h: &AdamHyper,
) -> Result<(Vec<f64>, AdamState)> {
    let mut p = params.to_vec();
    let mut s = state.clone();
    adam_update(&mut p, grads, &mut s, h)?;
    Ok((p, s))
}

fn adam_update(params: &mut [f64], grads: &[f64], s: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || s.m.len() != params.len() || s.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam: {} parameters, {} gradients, state {}/{}",
            params.len(),
            grads.len(),
            s.m.len(),
            s.v.len()
        )));
    }
    s.step += 1;
    let t = s.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        s.m[i] = h.beta1 * s.m[i] + (1.0 - h.beta1) * g;
        s.v[i] = h.beta2 * s.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = s.m[i] / c1;
        let v_hat = s.v[i] / c2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    Ok(())
}

fn flatten(p: &DecoderParams) -> Vec<f64> {
    p.tensors().into_iter().flat_map(|(t, _)| t.iter().copied()).collect()
}

fn unflatten(p: &mut DecoderParams, flat: &[f64]) {
    let mut offset = 0;
    for t in p.tensors_mut() {
        t.copy_from_slice(&flat[offset..offset + t.len()]);
        offset += t.len();
    }
}

// ---------------------------------------------------------------------------
// Environment and checkpoints.

/// Optical configuration, sensor and (lazily built) PSF basis shared by runs.
pub struct TrainEnv {
    pub optics: OpticalConfig,
    pub response: SensorResponse,
    banks: Vec<(usize, OnceLock<BasisBank>)>,
}

impl TrainEnv {
    pub fn new(optics: OpticalConfig) -> Result<Self> {
        optics.validate()?;
        let response = SensorResponse::for_config(&optics);
        Ok(Self {
            optics,
            response,
            banks: (1..=32).map(|n| (n, OnceLock::new())).collect(),
        })
    }

    /// Basis fields for an `n x n` aperture grid, built on first use.
    pub fn bank(&self, n: usize) -> Result<&BasisBank> {
        let (_, cell) = self
            .banks
            .iter()
            .find(|(k, _)| *k == n)
            .ok_or_else(|| Error::Config(format!("aperture grid {n} is outside 1..=32")))?;
        if let Some(b) = cell.get() {
            return Ok(b);
        }
        let bank = BasisBank::build(&self.optics, n)?;
        Ok(cell.get_or_init(|| bank))
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(
            self.optics.min_depth(),
            self.optics.max_depth(),
            1.0 / self.response.max_channel_gain(),
        )
    }

    pub fn wavelengths_nm(&self) -> Vec<f64> {
        self.optics.wavelengths.iter().map(|l| l * 1e9).collect()
    }

    /// Initial aperture for `mode`, drawn from `seed`.
    pub fn initial_aperture(&self, mode: Mode, n: usize, seed: u64) -> Result<CodedAperture> {
        let nm = self.wavelengths_nm();
        let mut rng = Xoshiro256::seed_from_u64(seed);
        Ok(match mode {
            Mode::Vanilla => CodedAperture::open(nm),
            Mode::FixedBca => CodedAperture::random_binary(n, nm, &mut rng),
            Mode::LearnedBca => CodedAperture::random_binary_relaxed(n, nm, &mut rng),
            Mode::FixedCca | Mode::LearnedCca => {
                let primaries = default_primaries(&nm)?;
                CodedAperture::random_color(n, primaries, nm, &mut rng)?
            }
        })
    }
}

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub optics: OpticalConfig,
    pub cca: CodedAperture,
    pub decoder: DecoderParams,
    pub adam_decoder: AdamState,
    pub adam_optics: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng_state: [u64; 4],
}

impl Checkpoint {
    /// The aperture the renderer sees (thresholded for binary codes).
    pub fn effective_aperture(&self) -> Result<CodedAperture> {
        effective(&self.cca, self.train.mode)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKP_MAGIC);
        put_u32(&mut out, crate::binio::checked_u32(self.epoch, "epoch")?);
        for s in self.rng_state {
            put_u64(&mut out, s);
        }
        put_block(&mut out, self.train.to_kv().to_text().as_bytes());
        put_block(&mut out, self.optics.to_kv().to_text().as_bytes());
        put_block(&mut out, self.cca.to_text().as_bytes());
        put_block(&mut out, &self.decoder.to_bytes()?);
        for s in [&self.adam_decoder, &self.adam_optics] {
            put_u64(&mut out, s.step);
            put_u64(&mut out, s.m.len() as u64);
            put_f64s(&mut out, &s.m);
            put_f64s(&mut out, &s.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("CKP1", bytes);
        r.magic(CKP_MAGIC)?;
        let epoch = r.u32("epoch")? as usize;
        let mut rng_state = [0u64; 4];
        for s in &mut rng_state {
            *s = r.u64("RNG state")?;
        }
        let text = |b: &[u8], what: &str| {
            std::str::from_utf8(b)
                .map(str::to_owned)
                .map_err(|_| Error::parse("CKP1", format!("{what} block is not UTF-8")))
        };
        let train = TrainConfig::from_kv(&KvMap::parse(&text(r.block("training config")?, "training")?)?)?;
        let optics = OpticalConfig::from_kv(&KvMap::parse(&text(r.block("optical config")?, "optics")?)?)?;
        let cca = CodedAperture::from_text(&text(r.block("aperture")?, "aperture")?)?.aperture;
        let decoder = DecoderParams::from_bytes(r.block("decoder")?)?;
        let mut adam = Vec::with_capacity(2);
        for what in ["decoder Adam state", "optics Adam state"] {
            let step = r.u64(what)?;
            let len = usize::try_from(r.u64(what)?)
                .map_err(|_| Error::parse("CKP1", format!("{what} length overflows")))?;
            let m = r.f64s(len, what)?;
            let v = r.f64s(len, what)?;
            adam.push(AdamState { m, v, step });
        }
        r.finish()?;
        if Xoshiro256::from_state(rng_state).is_none() {
            return Err(Error::parse("CKP1", "RNG state is all zero"));
        }
        let adam_optics = adam.pop().expect("two states");
        let adam_decoder = adam.pop().expect("two states");
        Ok(Self {
            train,
            optics,
            cca,
            decoder,
            adam_decoder,
            adam_optics,
            epoch,
            rng_state,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn effective(cca: &CodedAperture, mode: Mode) -> Result<CodedAperture> {
    if mode.is_binary() {
        cca.binarize()
    } else {
        Ok(cca.clone())
    }
}

// ---------------------------------------------------------------------------
// Per-sample forward and backward.

/// How the coded image of a scene is produced.
pub enum OpticsPath<'a> {
    /// Sensor-integrated all-in-focus image.
    Bypass,
    /// Fixed PSF stack (frozen or measured optics).
    Frozen(PsfStack),
    /// PSFs recomputed from the aperture at every batch.
    Learned(&'a BasisBank),
}

struct SampleOut {
    terms: LossTerms,
    metrics: MetricsReport,
    decoder_grad: DecoderParams,
    kernel_grad: Option<Array4<f64>>,
}

fn render_scene(
    scene: &Scene,
    stack: Option<&PsfStack>,
    resp: &SensorResponse,
) -> Result<(CodedImage, Option<crate::render::RenderTape>)> {
    match stack {
        None => Ok((sensor_integrate(&scene.cube, resp)?, None)),
        Some(s) => {
            let (img, tape) = render_forward(&scene.cube, &scene.depth, s, resp)?;
            Ok((img, Some(tape)))
        }
    }
}

fn process_sample(
    scene: &Scene,
    stack: Option<&PsfStack>,
    resp: &SensorResponse,
    decoder: &DecoderParams,
    weights: &LossWeights,
    want_kernel_grad: bool,
) -> Result<SampleOut> {
    let (img, tape) = render_scene(scene, stack, resp)?;
    let (pred, cache) = decoder_forward(decoder, &img)?;
    let (terms, g_pred) = total_loss(&scene.depth.values, &pred.values, weights)?;
    let metrics = evaluate_metrics(&scene.depth.values, &pred.values)?;
    let (decoder_grad, g_img) = decoder_backward(decoder, &cache, &g_pred)?;
    let kernel_grad = match (want_kernel_grad, tape) {
        (true, Some(t)) => Some(t.kernel_vjp(&g_img)?),
        _ => None,
    };
    Ok(SampleOut {
        terms,
        metrics,
        decoder_grad,
        kernel_grad,
    })
}

/// Mean loss terms and training metrics of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: LossTerms,
    pub metrics: MetricsReport,
}

impl EpochLog {
    pub fn tsv_header() -> String {
        format!(
            "epoch\tloss_grad\tloss_normal\tloss_smooth\tloss_total\t{}",
            MetricsReport::tsv_header()
        )
    }

    pub fn to_tsv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}",
            self.epoch,
            t.grad,
            t.normal,
            t.smooth,
            t.total,
            self.metrics.to_tsv_row()
        )
    }
}

/// Optional side effects of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Start from this aperture instead of a random one.
    pub initial_aperture: Option<CodedAperture>,
    /// Rewritten after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    /// Tab-separated per-epoch log, rewritten after every epoch.
    pub log_path: Option<PathBuf>,
    /// Where to write the diagnostic dump of a non-finite batch.
    pub dump_dir: Option<PathBuf>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn check_dataset(data: &[Scene], cfg: &OpticalConfig) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::Config("training needs at least one scene".into()))?;
    let (h, w, _) = first.cube.dim();
    for (i, s) in data.iter().enumerate() {
        if s.cube.dim().0 != h || s.cube.dim().1 != w {
            return Err(Error::Shape(format!("scene {i} is not {h}x{w}")));
        }
        if s.depth.dim() != (h, w) {
            return Err(Error::Shape(format!("scene {i}: depth map does not match the cube")));
        }
        let same = s.cube.wavelengths.len() == cfg.wavelengths.len()
            && s.cube
                .wavelengths
                .iter()
                .zip(&cfg.wavelengths)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * b);
        if !same {
            return Err(Error::Consistency(format!(
                "scene {i} wavelengths do not match the optical configuration"
            )));
        }
    }
    Ok(())
}

struct Loop<'a> {
    data: &'a [Scene],
    resp: &'a SensorResponse,
    path: OpticsPath<'a>,
    mode: Mode,
    weights: LossWeights,
    batch_size: usize,
    dec_hyper: AdamHyper,
    opt_hyper: AdamHyper,
    dump_dir: Option<PathBuf>,
}

struct LoopState {
    decoder: DecoderParams,
    adam_decoder: AdamState,
    cca: CodedAperture,
    adam_optics: AdamState,
    rng: Xoshiro256,
}

impl Loop<'_> {
    fn epoch(&self, st: &mut LoopState, epoch: usize) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        st.rng.shuffle(&mut order);
        let mut terms = LossTerms::default();
        let mut metrics = Vec::with_capacity(order.len());
        for (b, batch) in order.chunks(self.batch_size).enumerate() {
            let learned = match &self.path {
                OpticsPath::Learned(bank) => {
                    let eff = effective(&st.cca, self.mode)?;
                    Some((*bank, eff.clone(), bank.psf_stack(&eff)?))
                }
                _ => None,
            };
            let stack = match (&self.path, &learned) {
                (OpticsPath::Frozen(s), _) => Some(s),
                (_, Some((_, _, s))) => Some(s),
                _ => None,
            };
            let want_k = learned.is_some();
            let outs: Vec<Result<SampleOut>> = batch
                .par_iter()
                .map(|&i| {
                    process_sample(&self.data[i], stack, self.resp, &st.decoder, &self.weights, want_k)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut dec_grad = st.decoder.zeros_like();
            let mut kernel_grad: Option<Array4<f64>> = None;
            let mut batch_terms = LossTerms::default();
            for out in outs {
                let out = match out {
                    // Non-finite or negative values surface as domain errors.
                    Err(Error::Domain(msg)) => {
                        return Err(self.dump(st, epoch, b, batch, &LossTerms::default(), &msg))
                    }
                    other => other?,
                };
                batch_terms.add(&out.terms);
                metrics.push(out.metrics);
                dec_grad.add_assign(&out.decoder_grad);
                if let Some(k) = out.kernel_grad {
                    match &mut kernel_grad {
                        Some(acc) => *acc += &k,
                        None => kernel_grad = Some(k),
                    }
                }
            }
            let mut dec_flat = flatten(&dec_grad);
            dec_flat.iter_mut().for_each(|g| *g *= scale);
            let weight_grad = match (&learned, kernel_grad) {
                (Some((bank, eff, _)), Some(k)) => Some(bank.weight_vjp(eff, &(k * scale))?),
                _ => None,
            };
            let finite = batch_terms.total.is_finite()
                && dec_flat.iter().all(|g| g.is_finite())
                && weight_grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(self.dump(st, epoch, b, batch, &batch_terms.scaled(scale), "non-finite gradient"));
            }
            terms.add(&batch_terms);

            let mut params = flatten(&st.decoder);
            adam_update(&mut params, &dec_flat, &mut st.adam_decoder, &self.dec_hyper)?;
            unflatten(&mut st.decoder, &params);
            if let Some(g) = weight_grad {
                // Straight-through for binary codes: the thresholded code's
                // gradient updates the continuous weights directly.
                let w = st.cca.weights.as_slice_mut().expect("standard layout");
                adam_update(w, g.as_slice().expect("standard layout"), &mut st.adam_optics, &self.opt_hyper)?;
                st.cca = st.cca.project_constraint();
            }
            if !st.decoder.all_finite() {
                return Err(self.dump(st, epoch, b, batch, &batch_terms.scaled(scale), "non-finite decoder update"));
            }
        }
        Ok(EpochLog {
            epoch: epoch + 1,
            terms: terms.scaled(1.0 / self.data.len() as f64),
            metrics: MetricsReport::mean(&metrics),
        })
    }

    fn dump(
        &self,
        st: &LoopState,
        epoch: usize,
        batch: usize,
        scenes: &[usize],
        terms: &LossTerms,
        cause: &str,
    ) -> Error {
        let mut detail = format!(
            "{cause}; loss terms grad={:?} normal={:?} smooth={:?} total={:?}; scenes {scenes:?}",
            terms.grad, terms.normal, terms.smooth, terms.total
        );
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nonfinite_epoch{}_batch{batch}.txt", epoch + 1));
            let text = format!(
                "epoch = {}\nbatch = {batch}\nscenes = {scenes:?}\n{detail}\n\n# aperture\n{}",
                epoch + 1,
                st.cca.to_text()
            );
            match write_atomic(&path, text.as_bytes()) {
                Ok(()) => detail.push_str(&format!("; dump written to {}", path.display())),
                Err(e) => detail.push_str(&format!("; dump failed: {e}")),
            }
        }
        Error::NonFinite {
            epoch: epoch + 1,
            batch,
            detail,
        }
    }
}

fn write_log(path: &Path, rows: &[String]) -> Result<()> {
    let mut text = EpochLog::tsv_header();
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Trains decoder and (mode permitting) aperture end to end.
pub fn train_e2e(
    data: &[Scene],
    cfg: &TrainConfig,
    env: &TrainEnv,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_dataset(data, &env.optics)?;
    let arch = env.architecture()?;
    let seeds = |k: u64| Xoshiro256::derive_seed(cfg.seed, k);

    let (mut st, start) = match &opts.resume {
        Some(ck) => {
            let mut expected = ck.train.clone();
            expected.epochs = cfg.epochs;
            if &expected != cfg || ck.optics != env.optics {
                return Err(Error::Consistency(
                    "checkpoint was produced with a different configuration".into(),
                ));
            }
            ck.decoder.check_matches(&arch)?;
            let rng = Xoshiro256::from_state(ck.rng_state)
                .ok_or_else(|| Error::Consistency("checkpoint RNG state is invalid".into()))?;
            (
                LoopState {
                    decoder: ck.decoder.clone(),
                    adam_decoder: ck.adam_decoder.clone(),
                    cca: ck.cca.clone(),
                    adam_optics: ck.adam_optics.clone(),
                    rng,
                },
                ck.epoch,
            )
        }
        None => {
            let cca = match &opts.initial_aperture {
                Some(c) => {
                    c.check_wavelengths(&env.optics.wavelengths)?;
                    if c.mode == ApertureMode::Binary && !cfg.mode.is_binary()
                        || cfg.mode.is_binary() && c.mode != ApertureMode::Binary
                    {
                        return Err(Error::Config(format!(
                            "mode {} cannot start from a {:?} aperture",
                            cfg.mode, c.mode
                        )));
                    }
                    c.project_constraint()
                }
                None => env.initial_aperture(cfg.mode, cfg.cca_cells, seeds(1))?,
            };
            let decoder = decoder_init(&arch, seeds(2));
            let n_dec = decoder.num_parameters();
            let n_opt = cca.weights.len();
            (
                LoopState {
                    decoder,
                    adam_decoder: AdamState::zeros(n_dec),
                    cca,
                    adam_optics: AdamState::zeros(n_opt),
                    rng: Xoshiro256::seed_from_u64(seeds(3)),
                },
                0,
            )
        }
    };

    let path = if !cfg.mode.uses_optics() {
        OpticsPath::Bypass
    } else {
        let bank = env.bank(st.cca.n())?;
        if cfg.mode.learns_optics() {
            OpticsPath::Learned(bank)
        } else {
            OpticsPath::Frozen(bank.psf_stack(&effective(&st.cca, cfg.mode)?)?)
        }
    };
    let lp = Loop {
        data,
        resp: &env.response,
        path,
        mode: cfg.mode,
        weights: cfg.loss_weights,
        batch_size: cfg.batch_size,
        dec_hyper: cfg.hyper(cfg.lr_decoder),
        opt_hyper: cfg.hyper(cfg.lr_optics),
        dump_dir: opts.dump_dir.clone(),
    };

    let mut rows: Vec<String> = match (&opts.log_path, &opts.resume) {
        (Some(p), Some(ck)) if p.exists() => std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .skip(1)
            .filter(|l| {
                l.split('\t')
                    .next()
                    .and_then(|e| e.parse::<usize>().ok())
                    .is_some_and(|e| e <= ck.epoch)
            })
            .map(str::to_owned)
            .collect(),
        _ => Vec::new(),
    };
    let mut log = Vec::new();
    let mut checkpoint = snapshot(cfg, env, &st, start);
    for epoch in start..cfg.epochs {
        let entry = lp.epoch(&mut st, epoch)?;
        if opts.verbose {
            eprintln!(
                "[{}] epoch {}/{}: loss {:.5} rmse {:.4}",
                cfg.mode,
                epoch + 1,
                cfg.epochs,
                entry.terms.total,
                entry.metrics.rmse
            );
        }
        rows.push(entry.to_tsv_row());
        log.push(entry);
        checkpoint = snapshot(cfg, env, &st, epoch + 1);
        if let Some(p) = &opts.checkpoint_path {
            checkpoint.write(p)?;
        }
        if let Some(p) = &opts.log_path {
            write_log(p, &rows)?;
        }
    }
    if let Some(p) = &opts.log_path {
        if cfg.epochs <= start {
            write_log(p, &rows)?;
        }
    }
    Ok(TrainOutput { checkpoint, log })
}

fn snapshot(cfg: &TrainConfig, env: &TrainEnv, st: &LoopState, epoch: usize) -> Checkpoint {
    Checkpoint {
        train: cfg.clone(),
        optics: env.optics.clone(),
        cca: st.cca.clone(),
        decoder: st.decoder.clone(),
        adam_decoder: st.adam_decoder.clone(),
        adam_optics: st.adam_optics.clone(),
        epoch,
        rng_state: st.rng.state(),
    }
}

// ---------------------------------------------------------------------------
// Evaluation.

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_scene: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

impl EvalReport {
    /// Header, one row per scene, then the aggregate row labelled `mean`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("scene\t{}\n", MetricsReport::tsv_header());
        for (i, m) in self.per_scene.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\n", m.to_tsv_row()));
        }
        out.push_str(&format!("mean\t{}\n", self.mean.to_tsv_row()));
        out
    }
}

/// Scores an arbitrary per-scene depth predictor.
pub fn evaluate_predictor<F>(data: &[Scene], predict: F) -> Result<EvalReport>
where
    F: Fn(&Scene) -> Result<Array2<f64>> + Sync,
{
    let per_scene = data
        .par_iter()
        .map(|s| evaluate_metrics(&s.depth.values, &predict(s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean: MetricsReport::mean(&per_scene),
        per_scene,
    })
}

/// The PSF stack a checkpoint renders with (`None` for the vanilla baseline).
pub fn checkpoint_stack(ck: &Checkpoint, env: &TrainEnv) -> Result<Option<PsfStack>> {
    if !ck.train.mode.uses_optics() {
        return Ok(None);
    }
    let eff = ck.effective_aperture()?;
    Ok(Some(env.bank(eff.n())?.psf_stack(&eff)?))
}

fn check_checkpoint(ck: &Checkpoint, env: &TrainEnv) -> Result<()> {
    if ck.optics != env.optics {
        return Err(Error::Consistency(
            "checkpoint optical configuration differs from the active one".into(),
        ));
    }
    ck.decoder.check_matches(&env.architecture()?)
}

/// Renders every scene through the checkpoint's optics, decodes it and
/// averages the metrics.
pub fn evaluate(ck: &Checkpoint, data: &[Scene], env: &TrainEnv) -> Result<EvalReport> {
    check_checkpoint(ck, env)?;
    let stack = checkpoint_stack(ck, env)?;
    evaluate_with_stack(&ck.decoder, stack.as_ref(), data, env)
}

/// Evaluation with an explicit PSF stack, e.g. a measured one.
pub fn evaluate_with_stack(
    decoder: &DecoderParams,
    stack: Option<&PsfStack>,
    data: &[Scene],
    env: &TrainEnv,
) -> Result<EvalReport> {
    check_dataset(data, &env.optics)?;
    evaluate_predictor(data, |s| {
        let (img, _) = render_scene(s, stack, &env.response)?;
        Ok(decoder_forward(decoder, &img)?.0.values)
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning on measured PSFs.

/// Retrains only the decoder with the renderer fixed to `measured`.
///
/// A fresh decoder Adam state is used; the aperture, its optimizer state and
/// the RNG state of the checkpoint are left untouched.
pub fn finetune_measured(
    ck: &Checkpoint,
    measured: &PsfStack,
    data: &[Scene],
    epochs: usize,
    lr: f64,
    env: &TrainEnv,
    verbose: bool,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    check_checkpoint(ck, env)?;
    measured.check_dims(&env.optics)?;
    if !ck.train.mode.uses_optics() {
        return Err(Error::Config("the vanilla baseline has no optics to replace".into()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    if epochs == 0 {
        return Ok((ck.clone(), Vec::new()));
    }
    check_dataset(data, &env.optics)?;
    let lp = Loop {
        data,
        resp: &env.response,
        path: OpticsPath::Frozen(measured.clone()),
        mode: ck.train.mode,
        weights: ck.train.loss_weights,
        batch_size: ck.train.batch_size,
        dec_hyper: ck.train.hyper(lr),
        opt_hyper: ck.train.hyper(0.0),
        dump_dir: None,
    };
    let mut st = LoopState {
        decoder: ck.decoder.clone(),
        adam_decoder: AdamState::zeros(ck.decoder.num_parameters()),
        cca: ck.cca.clone(),
        adam_optics: ck.adam_optics.clone(),
        rng: Xoshiro256::seed_from_u64(Xoshiro256::derive_seed(ck.train.seed, 4)),
    };
    let mut log = Vec::new();
    for epoch in 0..epochs {
        let entry = lp.epoch(&mut st, epoch)?;
        if verbose {
            eprintln!("[finetune] epoch {}/{epochs}: loss {:.5}", epoch + 1, entry.terms.total);
        }
        log.push(entry);
    }
    let mut out = ck.clone();
    out.decoder = st.decoder;
    out.adam_decoder = st.adam_decoder;
    Ok((out, log))
}

// ---------------------------------------------------------------------------
// Gradient check.

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub weights_checked: usize,
    pub weight_max_rel: f64,
    pub decoder_checked: usize,
    pub decoder_max_rel: f64,
    /// Largest analytic gradient magnitude seen (zero for a zero-loss setup).
    pub max_abs_grad: f64,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.weight_max_rel.max(self.decoder_max_rel)
    }
}

/// A small aperture (`n x n`, `r` random primaries), decoder and scene for `cfg`.
pub fn gradcheck_fixture(
    cfg: &OpticalConfig,
    n: usize,
    r: usize,
    size: usize,
    seed: u64,
) -> Result<(CodedAperture, DecoderParams, Scene)> {
    let env = TrainEnv::new(cfg.clone())?;
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let nm = env.wavelengths_nm();
    let primaries = Array2::from_shape_fn((r, nm.len()), |_| 0.1 + 0.8 * rng.next_f64());
    let cca = CodedAperture::random_color(n, primaries, nm, &mut rng)?;
    let decoder = decoder_init(&env.architecture()?, rng.next_u64_seed());
    let spec = SceneSpec {
        seed: rng.next_u64_seed(),
        height: size,
        width: size,
        planes: cfg.num_depths().min(2),
        z_min: cfg.min_depth(),
        z_max: cfg.max_depth(),
        texture: Texture::Mixed,
        occluder_prob: 0.5,
    };
    let scene = generate_scene(&spec, cfg)?;
    Ok((cca, decoder, scene))
}

trait SeedExt {
    fn next_u64_seed(&mut self) -> u64;
}

impl SeedExt for Xoshiro256 {
    fn next_u64_seed(&mut self) -> u64 {
        rand_core::RngCore::next_u64(self)
    }
}

/// Loss with the decoder's rectifier pattern frozen at `gates`, so central
/// differences do not straddle activation kinks.
fn loss_only(
    scene: &Scene,
    stack: &PsfStack,
    resp: &SensorResponse,
    decoder: &DecoderParams,
    gates: &ForwardCache,
    weights: &LossWeights,
) -> Result<f64> {
    let (img, _) = render_forward(&scene.cube, &scene.depth, stack, resp)?;
    let pred = decoder_forward_gated(decoder, &img, gates)?;
    Ok(total_loss(&scene.depth.values, &pred.values, weights)?.0.total)
}

fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    let d = (a - f).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(f.abs()).max(floor)
    }
}

/// Compares analytic gradients of the total loss with central differences
/// for every aperture weight and `per_tensor` entries of each decoder tensor.
///
/// The decoder's rectifier pattern is frozen at the evaluation point while
/// differencing; the loss is piecewise smooth and a step that crosses a kink
/// would otherwise measure a one-sided slope.
///
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
/// with `floor = 1e-6 * max |gradient|` so entries that are zero up to
/// round-off do not dominate.
pub fn gradcheck(
    env: &TrainEnv,
    cca: &CodedAperture,
    decoder: &DecoderParams,
    scene: &Scene,
    weights: &LossWeights,
    per_tensor: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let cfg = &env.optics;
    if cfg.sim_grid > 64 || scene.depth.dim().0 > 32 || scene.depth.dim().1 > 32 {
        return Err(Error::Config("gradient checks need a grid <= 64 and a scene <= 32x32".into()));
    }
    let bank = env.bank(cca.n())?;
    let resp = &env.response;
    let stack = bank.psf_stack(cca)?;
    let out = process_sample(scene, Some(&stack), resp, decoder, weights, true)?;
    let w_grad = bank.weight_vjp(cca, &out.kernel_grad.expect("kernel gradient requested"))?;
    let (img, _) = render_forward(&scene.cube, &scene.depth, &stack, resp)?;
    let (_, gates) = decoder_forward(decoder, &img)?;

    let loss_at_w = |w: &Array3<f64>| -> Result<f64> {
        let mut c = cca.clone();
        c.weights = w.clone();
        loss_only(scene, &bank.psf_stack(&c)?, resp, decoder, &gates, weights)
    };
    // With the gates frozen the loss is smooth, so a moderate step keeps
    // round-off well below truncation error.
    let h = 1e-4;
    let mut w_pairs = Vec::new();
    for (idx, &a) in w_grad.indexed_iter() {
        let mut plus = cca.weights.clone();
        plus[idx] += h;
        let mut minus = cca.weights.clone();
        minus[idx] -= h;
        let f = (loss_at_w(&plus)? - loss_at_w(&minus)?) / (2.0 * h);
        w_pairs.push((a, f));
    }

    let mut rng = Xoshiro256::seed_from_u64(seed);
    let grad_tensors: Vec<Vec<f64>> = out.decoder_grad.tensors().into_iter().map(|(t, _)| t.to_vec()).collect();
    let mut d_pairs = Vec::new();
    for (t, g) in grad_tensors.iter().enumerate() {
        for _ in 0..per_tensor.min(g.len()) {
            let i = rng.below(g.len());
            let mut plus = decoder.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = decoder.clone();
            minus.tensors_mut()[t][i] -= h;
            let f = (loss_only(scene, &stack, resp, &plus, &gates, weights)?
                - loss_only(scene, &stack, resp, &minus, &gates, weights)?)
                / (2.0 * h);
            d_pairs.push((g[i], f));
        }
    }
    let max_abs = |pairs: &[(f64, f64)]| pairs.iter().fold(0.0f64, |m, (a, _)| m.max(a.abs()));
    let worst = |pairs: &[(f64, f64)]| {
        let floor = 1e-6 * max_abs(pairs);
        pairs.iter().fold(0.0f64, |m, &(a, f)| m.max(rel_err(a, f, floor)))
    };
    Ok(GradcheckReport {
        weights_checked: w_pairs.len(),
        weight_max_rel: worst(&w_pairs),
        decoder_checked: d_pairs.len(),
        decoder_max_rel: worst(&d_pairs),
        max_abs_grad: max_abs(&w_pairs).max(max_abs(&d_pairs)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn hyper() -> AdamHyper {
        AdamHyper {
            lr: 0.1,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let p = vec![0.3, -1.0, 2.5];
        let (q, s) = adam_step(&p, &[0.0; 3], &AdamState::zeros(3), &hyper()).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let p = vec![1.0, 1.0, 1.0];
        let g = [0.5, -3.0, 1e-3];
        let (q, s) = adam_step(&p, &g, &AdamState::zeros(3), &hyper()).unwrap();
        for i in 0..3 {
            // m_hat = g, v_hat = g^2: the step is lr * g / (|g| + eps).
            let expected = 1.0 - 0.1 * g[i] / (g[i].abs() + 1e-8);
            assert!((q[i] - expected).abs() < 1e-15, "{i}");
            assert!(((1.0 - q[i]).abs() - 0.1).abs() < 1e-5 * 0.1 / g[i].abs().min(1.0));
        }
        assert!((s.m[0] - 0.005).abs() < 1e-15);
        let again = adam_step(&p, &g, &AdamState::zeros(3), &hyper()).unwrap();
        assert_eq!(again.0, q);
        assert_eq!(again.1, s);
    }

    #[test]
    fn adam_second_step_matches_closed_form() {
        let h = hyper();
        let (p1, s1) = adam_step(&[0.0], &[1.0], &AdamState::zeros(1), &h).unwrap();
        let (p2, _) = adam_step(&p1, &[2.0], &s1, &h).unwrap();
        let m = 0.99 * 0.01 + 0.01 * 2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.99f64.powi(2));
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = p1[0] - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p2[0] - expected).abs() < 1e-15);
        assert!(adam_step(&[0.0], &[1.0, 2.0], &AdamState::zeros(1), &h).is_err());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = TrainConfig {
            lr_optics: 0.013,
            mode: Mode::FixedBca,
            seed: 77,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut bad = cfg.to_kv();
        bad.set("beta1", "1.0");
        assert!(TrainConfig::from_kv(&bad).is_err());
        let mut bad = cfg.to_kv();
        bad.set("mode", "learned");
        assert!(TrainConfig::from_kv(&bad).is_err());
        for m in MODES {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }

    /// Tiny optics with four bands so the default primaries apply.
    fn tiny4() -> OpticalConfig {
        OpticalConfig {
            wavelengths: crate::optics::linear_wavelengths(450e-9, 660e-9, 4),
            ..OpticalConfig::tiny()
        }
    }

    fn tiny_setup(count: usize) -> (TrainEnv, Vec<Scene>) {
        let cfg = tiny4();
        let spec = SceneSpec {
            seed: 5,
            height: 16,
            width: 16,
            planes: 2,
            z_min: 0.5,
            z_max: 1.6,
            ..SceneSpec::default()
        };
        let data = generate_dataset(&spec, &cfg, count).unwrap();
        (TrainEnv::new(cfg).unwrap(), data)
    }

    fn tiny_train(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            batch_size: 2,
            cca_cells: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_optics_rate_freezes_aperture() {
        let (env, data) = tiny_setup(4);
        let cfg = TrainConfig {
            lr_optics: 0.0,
            ..tiny_train(Mode::LearnedCca)
        };
        let init = env.initial_aperture(cfg.mode, 2, Xoshiro256::derive_seed(cfg.seed, 1)).unwrap();
        let out = train_e2e(&data, &cfg, &env, &TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoint.cca.weights, init.weights);
        assert_ne!(out.checkpoint.decoder, decoder_init(&env.architecture().unwrap(), Xoshiro256::derive_seed(3, 2)));
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn learned_modes_stay_feasible_and_fixed_modes_stay_fixed() {
        let (env, data) = tiny_setup(4);
        for mode in [Mode::LearnedCca, Mode::LearnedBca, Mode::FixedCca, Mode::FixedBca] {
            let cfg = tiny_train(mode);
            let init = env.initial_aperture(mode, 2, Xoshiro256::derive_seed(cfg.seed, 1)).unwrap();
            let out = train_e2e(&data, &cfg, &env, &TrainOptions::default()).unwrap();
            let cca = &out.checkpoint.cca;
            assert!(cca.is_feasible(1e-9), "{mode}");
            if mode.learns_optics() {
                assert_ne!(cca.weights, init.weights, "{mode}");
                assert_eq!(out.checkpoint.adam_optics.step, 4);
            } else {
                assert_eq!(cca.weights, init.weights, "{mode}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (env, data) = tiny_setup(5);
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_train(Mode::LearnedCca)
        };
        let a = train_e2e(&data, &cfg, &env, &TrainOptions::default()).unwrap();
        let b = train_e2e(&data, &cfg, &env, &TrainOptions::default()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.log, b.log);

        let first = train_e2e(&data, &TrainConfig { epochs: 1, ..cfg.clone() }, &env, &TrainOptions::default()).unwrap();
        let resumed = train_e2e(
            &data,
            &cfg,
            &env,
            &TrainOptions {
                resume: Some(first.checkpoint),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.checkpoint.to_bytes().unwrap(), a.checkpoint.to_bytes().unwrap());
        assert_eq!(resumed.log[..], a.log[1..]);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let (env, data) = tiny_setup(2);
        let out = train_e2e(&data, &TrainConfig { epochs: 1, ..tiny_train(Mode::LearnedBca) }, &env, &TrainOptions::default()).unwrap();
        let bytes = out.checkpoint.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn vanilla_ignores_optics() {
        let (env, data) = tiny_setup(2);
        let out = train_e2e(&data, &TrainConfig { epochs: 1, ..tiny_train(Mode::Vanilla) }, &env, &TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoint.cca.mode, ApertureMode::Open);
        assert!(checkpoint_stack(&out.checkpoint, &env).unwrap().is_none());
        let direct = evaluate_predictor(&data, |s| {
            let img = sensor_integrate(&s.cube, &env.response)?;
            Ok(decoder_forward(&out.checkpoint.decoder, &img)?.0.values)
        })
        .unwrap();
        assert_eq!(evaluate(&out.checkpoint, &data, &env).unwrap(), direct);
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let (_, data) = tiny_setup(3);
        let r = evaluate_predictor(&data, |s| Ok(s.depth.values.clone())).unwrap();
        assert_eq!(r.mean.rmse, 0.0);
        assert_eq!(r.mean.mae, 0.0);
        assert_eq!(r.mean.delta1, 1.0);
        assert_eq!(r.per_scene.len(), 3);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (env, data) = tiny_setup(3);
        let out = train_e2e(&data, &TrainConfig { epochs: 1, ..tiny_train(Mode::FixedCca) }, &env, &TrainOptions::default()).unwrap();
        let a = evaluate(&out.checkpoint, &data, &env).unwrap();
        assert_eq!(a, evaluate(&out.checkpoint, &data, &env).unwrap());
        assert!(a.to_tsv().lines().last().unwrap().starts_with("mean\t"));
    }

    #[test]
    fn finetune_freezes_optics() {
        let (env, data) = tiny_setup(4);
        let ck = train_e2e(&data, &TrainConfig { epochs: 1, ..tiny_train(Mode::LearnedCca) }, &env, &TrainOptions::default())
            .unwrap()
            .checkpoint;
        let stack = checkpoint_stack(&ck, &env).unwrap().unwrap();
        let (same, log) = finetune_measured(&ck, &stack, &data, 0, 3e-5, &env, false).unwrap();
        assert_eq!(same, ck);
        assert!(log.is_empty());
        let (tuned, log) = finetune_measured(&ck, &stack, &data, 2, 3e-5, &env, false).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(tuned.cca, ck.cca);
        assert_ne!(tuned.decoder, ck.decoder);
        let mut wrong = stack.clone();
        wrong.depths.push(0.7);
        wrong.kernels = Array4::zeros((3, 4, 9, 9));
        assert!(finetune_measured(&ck, &wrong, &data, 1, 3e-5, &env, false).is_err());
    }

    #[test]
    fn nonfinite_loss_aborts_with_dump() {
        let (env, mut data) = tiny_setup(2);
        data[1].cube.values[[0, 0, 0]] = f64::INFINITY;
        let dir = tempfile::tempdir().unwrap();
        let err = train_e2e(
            &data,
            &tiny_train(Mode::FixedCca),
            &env,
            &TrainOptions {
                dump_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 1, .. }), "{err}");
        let dumps: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(dumps.len(), 1);
    }

    #[test]
    fn gradcheck_on_tiny_config() {
        let cfg = OpticalConfig::tiny();
        let env = TrainEnv::new(cfg.clone()).unwrap();
        let (cca, dec, scene) = gradcheck_fixture(&cfg, 2, 2, 16, 1).unwrap();
        let r = gradcheck(&env, &cca, &dec, &scene, &LossWeights::default(), 2, 9).unwrap();
        assert_eq!(r.weights_checked, 8);
        assert!(r.max_rel() < 1e-4, "{r:?}");
        assert_eq!(r, gradcheck(&env, &cca, &dec, &scene, &LossWeights::default(), 2, 9).unwrap());
    }

    #[test]
    fn zero_loss_configuration_has_zero_gradients() {
        let cfg = OpticalConfig::tiny();
        let env = TrainEnv::new(cfg.clone()).unwrap();
        let (cca, dec, mut scene) = gradcheck_fixture(&cfg, 2, 2, 16, 2).unwrap();
        let dec = dec.zeros_like();
        let mid = 0.5 * (cfg.min_depth() + cfg.max_depth());
        let (pred, _) = decoder_forward(&dec, &sensor_integrate(&scene.cube, &env.response).unwrap()).unwrap();
        scene.depth = crate::render::DepthMap::new(Array2::from_elem((16, 16), pred.values[[0, 0]])).unwrap();
        assert!((pred.values[[0, 0]] - mid).abs() < 1e-12);
        let r = gradcheck(&env, &cca, &dec, &scene, &LossWeights::default(), 1, 0).unwrap();
        assert_eq!(r.max_abs_grad, 0.0);
    }
}
