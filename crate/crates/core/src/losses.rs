//! Segmentation objectives on `[H, W, C]` probability maps: OHEM cross-entropy,
//! Lovász-softmax, edge-aware pairwise smoothness and their weighted sum.
//!
//! Every loss returns its value together with the gradient w.r.t. the
//! probabilities.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

/// A scalar loss and its gradient w.r.t. the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

fn check_pair(probs: &Tensor, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    let (h, w, c) = probs.hwc()?;
    if (h, w) != (labels.height, labels.width) {
        return Err(Error::shape("labels", &[h, w], &[labels.height, labels.width]));
    }
    Ok((h, w, c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemConfig {
    pub hard_fraction: f64,
    pub min_kept: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            hard_fraction: 0.25,
            min_kept: 1024,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::invalid("hard_fraction", "must lie in (0, 1]"));
        }
        if self.min_kept == 0 {
            return Err(Error::invalid("min_kept", "must be >= 1"));
        }
        Ok(())
    }

    pub fn hard_count(&self, valid: usize) -> usize {
        let k = (self.hard_fraction * valid as f64).ceil() as usize;
        k.max(self.min_kept).min(valid)
    }
}

/// Mean cross-entropy over the hardest pixels (ties broken by raster order).
pub fn ohem_ce(probs: &Tensor, labels: &LabelMap, cfg: &OhemConfig) -> Result<LossValue> {
    cfg.validate()?;
    let (h, w, c) = check_pair(probs, labels)?;
    let p = probs.data();
    let mut ce: Vec<(usize, f64)> = Vec::with_capacity(h * w);
    for (i, &y) in labels.data.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y as usize >= c {
            return Err(Error::invalid("labels", "class index out of range"));
        }
        ce.push((i, -p[i * c + y as usize].max(PROB_FLOOR).ln()));
    }
    if ce.is_empty() {
        return Err(Error::invalid("labels", "every pixel is ignored"));
    }
    let k = cfg.hard_count(ce.len());
    ce.sort_by(|a, b| b.1.total_cmp(&a.1));
    ce.truncate(k);
    ce.sort_by_key(|e| e.0);
    let mut grad = Tensor::zeros(probs.shape());
    let mut sum = 0.0;
    for &(i, l) in &ce {
        sum += l;
        let idx = i * c + labels.data[i] as usize;
        if p[idx] > PROB_FLOOR {
            grad[idx] = -1.0 / (p[idx] * k as f64);
        }
    }
    Ok(LossValue {
        value: sum / k as f64,
        grad,
    })
}

/// Lovász-softmax averaged over the classes present in `labels`.
pub fn lovasz_softmax(probs: &Tensor, labels: &LabelMap) -> Result<LossValue> {
    let (_, _, c) = check_pair(probs, labels)?;
    let p = probs.data();
    let valid: Vec<usize> = labels
        .data
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != IGNORE)
        .map(|(i, _)| i)
        .collect();
    if let Some(&i) = valid.iter().find(|&&i| labels.data[i] as usize >= c) {
        return Err(Error::invalid("labels", alloc::format!("class {} out of range", labels.data[i])));
    }
    let mut grad = Tensor::zeros(probs.shape());
    let present: Vec<usize> = (0..c)
        .filter(|&cl| valid.iter().any(|&i| labels.data[i] as usize == cl))
        .collect();
    if present.is_empty() {
        return Ok(LossValue { value: 0.0, grad });
    }
    let scale = 1.0 / present.len() as f64;
    let mut total = 0.0;
    let mut order: Vec<(usize, f64, bool)> = Vec::with_capacity(valid.len());
    for &cl in &present {
        order.clear();
        for &i in &valid {
            let fg = labels.data[i] as usize == cl;
            let pc = p[i * c + cl];
            let e = if fg { 1.0 - pc } else { pc };
            order.push((i, e, fg));
        }
        order.sort_by(|a, b| b.1.total_cmp(&a.1));
        let gts = order.iter().filter(|o| o.2).count() as f64;
        let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
        let mut prev_j = 0.0;
        for &(i, e, fg) in &order {
            if fg {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let g = jac - prev_j;
            prev_j = jac;
            total += e * g;
            grad[i * c + cl] += scale * if fg { -g } else { g };
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessConfig {
    pub tau_w: f64,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self { tau_w: 0.1 }
    }
}

/// Mean over 4-neighbour pairs of `w_pq * |P(p) - P(q)|_1`, with
/// `w_pq = exp(-|g(p) - g(q)| / tau_w)` on the channel mean of `guide`.
pub fn smoothness(probs: &Tensor, guide: &Tensor, cfg: &SmoothnessConfig) -> Result<LossValue> {
    if !(cfg.tau_w > 0.0) {
        return Err(Error::invalid("tau_w", "must be > 0"));
    }
    let (h, w, c) = probs.hwc()?;
    let (gh, gw, gc) = guide.hwc()?;
    if (gh, gw) != (h, w) {
        return Err(Error::shape("smoothness guide", &[h, w, gc], guide.shape()));
    }
    let gbar: Vec<f64> = guide
        .data()
        .chunks_exact(gc)
        .map(|px| px.iter().sum::<f64>() / gc as f64)
        .collect();
    let pairs = h * w.saturating_sub(1) + w * h.saturating_sub(1);
    let mut grad = Tensor::zeros(probs.shape());
    if pairs == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let p = probs.data();
    let norm = 1.0 / pairs as f64;
    let mut total = 0.0;
    let mut pair = |a: usize, b: usize, grad: &mut Tensor| {
        let wt = (-(gbar[a] - gbar[b]).abs() / cfg.tau_w).exp();
        for k in 0..c {
            let d = p[a * c + k] - p[b * c + k];
            total += wt * d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[a * c + k] += norm * wt * s;
            grad[b * c + k] -= norm * wt * s;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                pair(i, i + 1, &mut grad);
            }
            if y + 1 < h {
                pair(i, i + w, &mut grad);
            }
        }
    }
    Ok(LossValue {
        value: total * norm,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_ohem: f64,
    pub w_lovasz: f64,
    pub lambda_smooth: f64,
    pub adaptive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ohem: 0.6,
            w_lovasz: 0.4,
            lambda_smooth: 0.1,
            adaptive: false,
        }
    }
}

/// Fraction of training over which the adaptive ramps run.
pub const ADAPTIVE_RAMP: f64 = 0.5;

fn ramp(progress: f64) -> f64 {
    (progress / ADAPTIVE_RAMP).min(1.0)
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("w_ohem", self.w_ohem),
            ("w_lovasz", self.w_lovasz),
            ("lambda_smooth", self.lambda_smooth),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(k, "must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    /// Smoothness weight at `progress` in `[0, 1]`.
    pub fn lambda_at(&self, progress: f64) -> f64 {
        if self.adaptive {
            self.lambda_smooth * ramp(progress)
        } else {
            self.lambda_smooth
        }
    }
}

/// `w_ohem * l_ohem + w_lovasz * l_lovasz + lambda * l_smooth`.
pub fn total_loss(l_ohem: f64, l_lovasz: f64, l_smooth: f64, w: &LossWeights, progress: f64) -> Result<f64> {
    w.validate()?;
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::invalid("progress", "must lie in [0, 1]"));
    }
    Ok(w.w_ohem * l_ohem + w.w_lovasz * l_lovasz + w.lambda_at(progress) * l_smooth)
}

/// Loss block of the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub hard_fraction: f64,
    pub min_kept: usize,
    pub lambda_smooth: f64,
    pub tau_w: f64,
    pub adaptive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let o = OhemConfig::default();
        Self {
            hard_fraction: o.hard_fraction,
            min_kept: o.min_kept,
            lambda_smooth: 0.1,
            tau_w: 0.1,
            adaptive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.ohem_at(1.0).validate()?;
        self.weights().validate()?;
        if !(self.tau_w > 0.0) {
            return Err(Error::invalid("tau_w", "must be > 0"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_smooth: self.lambda_smooth,
            adaptive: self.adaptive,
            ..LossWeights::default()
        }
    }

    /// OHEM settings at `progress`; adaptive mode ramps the hard fraction
    /// from 1 down to the configured value.
    pub fn ohem_at(&self, progress: f64) -> OhemConfig {
        let hard_fraction = if self.adaptive {
            1.0 + (self.hard_fraction - 1.0) * ramp(progress)
        } else {
            self.hard_fraction
        };
        OhemConfig {
            hard_fraction,
            min_kept: self.min_kept,
        }
    }

    pub fn smoothness(&self) -> SmoothnessConfig {
        SmoothnessConfig { tau_w: self.tau_w }
    }
}

/// All loss terms at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ohem: f64,
    pub lovasz: f64,
    pub smooth: f64,
    pub total: f64,
    pub grad: Tensor,
}

pub fn segmentation_loss(
    probs: &Tensor,
    labels: &LabelMap,
    guide: &Tensor,
    cfg: &LossConfig,
    progress: f64,
) -> Result<LossBreakdown> {
    let w = cfg.weights();
    let o = ohem_ce(probs, labels, &cfg.ohem_at(progress))?;
    let l = lovasz_softmax(probs, labels)?;
    let lambda = w.lambda_at(progress);
    let s = if lambda > 0.0 {
        smoothness(probs, guide, &cfg.smoothness())?
    } else {
        LossValue {
            value: 0.0,
            grad: Tensor::zeros(probs.shape()),
        }
    };
    let total = total_loss(o.value, l.value, s.value, &w, progress)?;
    let mut grad = o.grad;
    grad.scale(w.w_ohem);
    grad.axpy(w.w_lovasz, &l.grad);
    grad.axpy(lambda, &s.grad);
    Ok(LossBreakdown {
        ohem: o.value,
        lovasz: l.value,
        smooth: s.value,
        total,
        grad,
    })
}

/// Which loss a [`LossStage`] evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    Ohem { labels: LabelMap, cfg: OhemConfig },
    Lovasz { labels: LabelMap },
    Smoothness { guide: Tensor, cfg: SmoothnessConfig },
}

/// A loss as a stage from probabilities to a one-element tensor.
pub struct LossStage {
    pub kind: LossKind,
}

struct ScaledGrad(Tensor);

impl Adjoint for ScaledGrad {
    fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
        ct.expect_shape("loss cotangent", &[1])?;
        Ok(self.0.map(|g| g * ct[0]))
    }
}

impl Stage for LossStage {
    fn name(&self) -> &str {
        match self.kind {
            LossKind::Ohem { .. } => "loss.ohem",
            LossKind::Lovasz { .. } => "loss.lovasz",
            LossKind::Smoothness { .. } => "loss.smoothness",
        }
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        _: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let lv = match &self.kind {
            LossKind::Ohem { labels, cfg } => ohem_ce(input, labels, cfg)?,
            LossKind::Lovasz { labels } => lovasz_softmax(input, labels)?,
            LossKind::Smoothness { guide, cfg } => smoothness(input, guide, cfg)?,
        };
        Ok((Tensor::new(&[1], vec![lv.value])?, Box::new(ScaledGrad(lv.grad))))
    }
}

/// Brute-force Lovász extension of the Jaccard loss of one class, evaluated
/// as the threshold integral `int_0^inf f({p : e_p >= t}) dt` with
/// `f(S) = |S| / |G u S|`.
pub fn lovasz_extension_oracle(errors: &[f64], fg: &[bool]) -> f64 {
    let f = |set: &[bool]| -> f64 {
        let s = set.iter().filter(|&&b| b).count() as f64;
        let u = set.iter().zip(fg).filter(|(&a, &g)| a || g).count() as f64;
        if u == 0.0 {
            0.0
        } else {
            s / u
        }
    };
    let mut levels: Vec<f64> = errors.iter().copied().filter(|&e| e > 0.0).collect();
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    let mut total = 0.0;
    let mut lo = 0.0;
    for &t in &levels {
        let set: Vec<bool> = errors.iter().map(|&e| e >= t).collect();
        total += (t - lo) * f(&set);
        lo = t;
    }
    total
}
