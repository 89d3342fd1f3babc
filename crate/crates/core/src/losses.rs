//! Depth training losses with exact adjoints, and the evaluation metrics.
//!
//! `y` is the reference depth map, `y_hat` the estimate. Every loss is a mean
//! over pixels.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Weights of the gradient, normal and smoothness terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            mu: 1.0,
            sigma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, mu: f64, sigma: f64) -> Result<Self> {
        let w = Self { alpha, mu, sigma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.mu, self.sigma];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {all:?}")));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Denominator of the normal-consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalForm {
    /// Product of the norms: the cosine distance, zero for identical maps.
    #[default]
    Cosine,
    /// Larger of the two norms.
    MaxNorm,
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn nonneg(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn check_size(map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("Sobel needs at least 3x3, got {h}x{w}")));
    }
    Ok(())
}

fn check_pair(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<()> {
    if y.dim() != y_hat.dim() {
        return Err(Error::Shape(format!("reference {:?} vs estimate {:?}", y.dim(), y_hat.dim())));
    }
    if y.is_empty() {
        return Err(Error::Shape("empty depth maps".into()));
    }
    Ok(())
}

fn correlate3(map: &Array2<f64>, k: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for (a, row) in k.iter().enumerate() {
            for (b, &kv) in row.iter().enumerate() {
                if kv != 0.0 {
                    let rr = clamp(r as isize + a as isize - 1, h);
                    let cc = clamp(c as isize + b as isize - 1, w);
                    acc += kv * map[[rr, cc]];
                }
            }
        }
        acc
    })
}

fn correlate3_adjoint(grad: &Array2<f64>, k: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = grad.dim();
    let mut out = Array2::zeros((h, w));
    for ((r, c), &g) in grad.indexed_iter() {
        for (a, row) in k.iter().enumerate() {
            for (b, &kv) in row.iter().enumerate() {
                if kv != 0.0 {
                    let rr = clamp(r as isize + a as isize - 1, h);
                    let cc = clamp(c as isize + b as isize - 1, w);
                    out[[rr, cc]] += kv * g;
                }
            }
        }
    }
    out
}

/// Horizontal (along columns) and vertical Sobel responses, replicate-padded.
pub fn sobel_grad(map: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    check_size(map)?;
    Ok((correlate3(map, &SOBEL_X), correlate3(map, &SOBEL_Y)))
}

/// Adjoint of [`sobel_grad`].
pub fn sobel_adjoint(gx: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    correlate3_adjoint(gx, &SOBEL_X) + correlate3_adjoint(gy, &SOBEL_Y)
}

struct Term {
    value: f64,
    grad: Array2<f64>,
}

fn grad_term(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<Term> {
    let (gx, gy) = sobel_grad(y)?;
    let (hx, hy) = sobel_grad(y_hat)?;
    let m = y.len() as f64;
    let dx = &hx - &gx;
    let dy = &hy - &gy;
    let value = (dx.mapv(|v| v * v).sum() + dy.mapv(|v| v * v).sum()) / m;
    let grad = sobel_adjoint(&(dx * (2.0 / m)), &(dy * (2.0 / m)));
    Ok(Term { value, grad })
}

fn normal_term(y: &Array2<f64>, y_hat: &Array2<f64>, form: NormalForm) -> Result<Term> {
    let (gx, gy) = sobel_grad(y)?;
    let (hx, hy) = sobel_grad(y_hat)?;
    let m = y.len() as f64;
    let mut value = 0.0;
    let mut dpx = Array2::zeros(y.dim());
    let mut dpy = Array2::zeros(y.dim());
    for idx in ndarray::indices(y.dim()) {
        let n = [gx[idx], gy[idx], 1.0];
        let t = [hx[idx], hy[idx], 1.0];
        let nn2 = n[0] * n[0] + n[1] * n[1] + 1.0;
        let tn2 = t[0] * t[0] + t[1] * t[1] + 1.0;
        let (nn, tn) = (nn2.sqrt(), tn2.sqrt());
        let dot = n[0] * t[0] + n[1] * t[1] + 1.0;
        // d(term)/dt for the first two components of t.
        let (term, d) = match form {
            NormalForm::Cosine => {
                // sqrt(a * a) == a exactly, so identical normals give exactly 0.
                let den = (nn2 * tn2).sqrt();
                let d = [0, 1].map(|i| -(n[i] / den - dot * t[i] / (nn * tn * tn * tn)));
                (nonneg(1.0 - dot / den), d)
            }
            NormalForm::MaxNorm if tn > nn => {
                let d = [0, 1].map(|i| -(n[i] / tn - dot * t[i] / (tn * tn * tn)));
                (1.0 - dot / tn, d)
            }
            NormalForm::MaxNorm => ((1.0 - dot / nn), [0, 1].map(|i| -n[i] / nn)),
        };
        value += term;
        dpx[idx] = d[0] / m;
        dpy[idx] = d[1] / m;
    }
    Ok(Term {
        value: value / m,
        grad: sobel_adjoint(&dpx, &dpy),
    })
}

fn smooth_term(y: &Array2<f64>, y_hat: &Array2<f64>) -> Term {
    let m = y.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(y.dim());
    Zip::from(&mut grad).and(y).and(y_hat).for_each(|g, &a, &b| {
        let d = a - b;
        if d.abs() < 1.0 {
            value += 0.5 * d * d;
            *g = -d / m;
        } else {
            value += d.abs() - 0.5;
            *g = -d.signum() / m;
        }
    });
    Term {
        value: value / m,
        grad,
    }
}

/// Mean squared difference of the Sobel gradients, both components summed.
pub fn grad_loss(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(grad_term(y, y_hat)?.value)
}

/// Mean normal-consistency term with the cosine denominator.
pub fn normal_loss(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<f64> {
    normal_loss_with(y, y_hat, NormalForm::Cosine)
}

pub fn normal_loss_with(y: &Array2<f64>, y_hat: &Array2<f64>, form: NormalForm) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(normal_term(y, y_hat, form)?.value)
}

/// Mean Huber penalty with unit threshold; `|d| = 1` takes the linear branch.
pub fn smooth_loss(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(smooth_term(y, y_hat).value)
}

/// Individual terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub grad: f64,
    pub normal: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, other: &LossTerms) {
        self.grad += other.grad;
        self.normal += other.normal;
        self.smooth += other.smooth;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            grad: self.grad * s,
            normal: self.normal * s,
            smooth: self.smooth * s,
            total: self.total * s,
        }
    }
}

/// Weighted loss and its gradient with respect to `y_hat`.
pub fn total_loss(
    y: &Array2<f64>,
    y_hat: &Array2<f64>,
    w: &LossWeights,
) -> Result<(LossTerms, Array2<f64>)> {
    total_loss_with(y, y_hat, w, NormalForm::Cosine)
}

pub fn total_loss_with(
    y: &Array2<f64>,
    y_hat: &Array2<f64>,
    w: &LossWeights,
    form: NormalForm,
) -> Result<(LossTerms, Array2<f64>)> {
    check_pair(y, y_hat)?;
    let mut grad = Array2::zeros(y.dim());
    let mut terms = LossTerms::default();
    if w.alpha != 0.0 {
        let t = grad_term(y, y_hat)?;
        terms.grad = t.value;
        grad.scaled_add(w.alpha, &t.grad);
    }
    if w.mu != 0.0 {
        let t = normal_term(y, y_hat, form)?;
        terms.normal = t.value;
        grad.scaled_add(w.mu, &t.grad);
    }
    if w.sigma != 0.0 {
        let t = smooth_term(y, y_hat);
        terms.smooth = t.value;
        grad.scaled_add(w.sigma, &t.grad);
    }
    terms.total = w.alpha * terms.grad + w.mu * terms.normal + w.sigma * terms.smooth;
    Ok((terms, grad))
}

/// Depth-estimation error metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub mae: f64,
    /// Mean of `|y - y_hat| / y_hat`.
    pub rel: f64,
    pub log10: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

pub const METRIC_NAMES: [&str; 7] = ["mae", "rel", "log10", "rmse", "delta1", "delta2", "delta3"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.mae,
            self.rel,
            self.log10,
            self.rmse,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    fn from_values(v: [f64; 7]) -> Self {
        Self {
            mae: v[0],
            rel: v[1],
            log10: v[2],
            rmse: v[3],
            delta1: v[4],
            delta2: v[5],
            delta3: v[6],
        }
    }

    /// Element-wise mean, accumulated in the given order.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let mut acc = [0.0; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = reports.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }

    /// `name = value` lines.
    pub fn to_kv_text(&self) -> String {
        METRIC_NAMES
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k} = {v:?}\n"))
            .collect()
    }

    pub fn tsv_header() -> String {
        METRIC_NAMES.join("\t")
    }

    pub fn to_tsv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

/// MAE, REL (relative to the estimate), mean log10 error, RMSE and threshold
/// accuracies `max(y / y_hat, y_hat / y) < 1.25^j`.
pub fn evaluate_metrics(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<MetricsReport> {
    check_pair(y, y_hat)?;
    if y.iter().chain(y_hat).any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::Domain("metrics need positive finite depths".into()));
    }
    let n = y.len() as f64;
    let mut acc = [0.0f64; 7];
    Zip::from(y).and(y_hat).for_each(|&a, &b| {
        let d = (a - b).abs();
        acc[0] += d;
        acc[1] += d / b;
        acc[2] += (a.log10() - b.log10()).abs();
        acc[3] += d * d;
        let ratio = (a / b).max(b / a);
        for (j, t) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *t {
                acc[4 + j] += 1.0;
            }
        }
    });
    let mut v = acc.map(|a| a / n);
    v[3] = v[3].sqrt();
    Ok(MetricsReport::from_values(v))
}
