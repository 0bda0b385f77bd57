//! Colour-filter mosaic `R(p) = <I(p), softplus(phi_{c(p)})>`.
//!
//! Responses are stored as unbounded logits and passed through softplus so
//! the effective transmission is never negative. In soft-selection mode each
//! of the four cells of the 2x2 period mixes all channel classes with
//! weights `softmax(selection / tau)`.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::{inverse_softplus, sigmoid, softplus};
use crate::error::{Error, Result};
use crate::params::{Grads, Group, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

pub const RESPONSE_PARAM: &str = "sensor.cfa_response";
pub const SELECTION_PARAM: &str = "sensor.cfa_selection";
/// Logit whose softplus is exactly zero.
pub const OFF_LOGIT: f64 = -1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfaLayout {
    BayerRggb,
    Rccc,
}

impl CfaLayout {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "BAYER_RGGB" => Ok(CfaLayout::BayerRggb),
            "RCCC" => Ok(CfaLayout::Rccc),
            other => Err(Error::invalid("cfa_layout", alloc::format!("unknown layout `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfaLayout::BayerRggb => "BAYER_RGGB",
            CfaLayout::Rccc => "RCCC",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfaModel {
    pub layout: CfaLayout,
    /// Channel class of each cell of the 2x2 period, row-major.
    pub cells: [usize; 4],
    pub classes: usize,
    /// Response logits `[classes, 3]`.
    pub responses: Tensor,
    /// Selection logits `[4, classes]`, used in soft mode.
    pub selection: Tensor,
    pub soft_selection: bool,
    pub tau: f64,
}

/// Initial model for a named layout. Bayer responses are one-hot; RCCC has
/// one red cell and three clear cells responding `(1, 1, 1) / 3`.
pub fn init_cfa(layout: &str) -> Result<CfaModel> {
    let layout = CfaLayout::parse(layout)?;
    let on = inverse_softplus(1.0);
    let (cells, responses) = match layout {
        CfaLayout::BayerRggb => {
            let mut r = vec![OFF_LOGIT; 9];
            for c in 0..3 {
                r[c * 3 + c] = on;
            }
            ([0, 1, 1, 2], Tensor::new(&[3, 3], r)?)
        }
        CfaLayout::Rccc => {
            let third = inverse_softplus(1.0 / 3.0);
            let r = vec![on, OFF_LOGIT, OFF_LOGIT, third, third, third];
            ([0, 1, 1, 1], Tensor::new(&[2, 3], r)?)
        }
    };
    let classes = responses.shape()[0];
    let selection = Tensor::from_fn(&[4, classes], |i| if cells[i / classes] == i % classes { 1.0 } else { 0.0 });
    Ok(CfaModel {
        layout,
        cells,
        classes,
        responses,
        selection,
        soft_selection: false,
        tau: 1.0,
    })
}

impl CfaModel {
    /// Effective (softplus) response of channel class `c`.
    pub fn effective_response(&self, c: usize) -> [f64; 3] {
        let r = &self.responses.data()[c * 3..c * 3 + 3];
        [softplus(r[0]), softplus(r[1]), softplus(r[2])]
    }

    /// Effective response seen at pixel `(y, x)` in hard mode.
    pub fn response_at(&self, y: usize, x: usize) -> [f64; 3] {
        self.effective_response(self.cells[(y % 2) * 2 + x % 2])
    }

    pub fn register(&self, params: &mut ParamSet, trainable: bool) -> Result<()> {
        params.insert(RESPONSE_PARAM, Group::Sensor, trainable, self.responses.clone())?;
        if self.soft_selection {
            params.insert(SELECTION_PARAM, Group::Sensor, trainable, self.selection.clone())?;
        }
        Ok(())
    }
}

/// Softmax of `logits / tau`.
fn softmax_t(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub struct CfaStage {
    pub cells: [usize; 4],
    pub classes: usize,
    pub soft_selection: bool,
    pub tau: f64,
    /// Crop odd frame sizes down to even instead of failing.
    pub allow_crop: bool,
}

impl CfaStage {
    pub fn new(model: &CfaModel) -> Self {
        Self {
            cells: model.cells,
            classes: model.classes,
            soft_selection: model.soft_selection,
            tau: model.tau,
            allow_crop: false,
        }
    }

    /// Per-cell class weights `[4][classes]`.
    fn weights(&self, params: &ParamSet) -> Result<Vec<Vec<f64>>> {
        if self.soft_selection {
            let sel = params.get(SELECTION_PARAM)?;
            sel.expect_shape(SELECTION_PARAM, &[4, self.classes])?;
            Ok((0..4)
                .map(|q| softmax_t(&sel.data()[q * self.classes..(q + 1) * self.classes], self.tau))
                .collect())
        } else {
            Ok((0..4)
                .map(|q| (0..self.classes).map(|c| if self.cells[q] == c { 1.0 } else { 0.0 }).collect())
                .collect())
        }
    }
}

struct CfaAdj<'a> {
    stage: &'a CfaStage,
    x: Tensor,
    in_shape: (usize, usize),
    logits: Vec<f64>,
    eff: Vec<[f64; 3]>,
    weights: Vec<Vec<f64>>,
}

impl Adjoint for CfaAdj<'_> {
    fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let (ih, iw) = self.in_shape;
        let (h, w, _) = self.x.hwc()?;
        ct.expect_shape("mosaic cotangent", &[h, w])?;
        let k = self.stage.classes;
        let mut gx = Tensor::zeros(&[ih, iw, 3]);
        // d[q][c] = sum over cell-q pixels of g * <x, eff_c>
        let mut d = vec![vec![0.0; k]; 4];
        // gresp[c] = sum over pixels of g * w_qc * x
        let mut gresp = vec![[0.0; 3]; k];
        let xd = self.x.data();
        for y in 0..h {
            for x in 0..w {
                let q = (y % 2) * 2 + x % 2;
                let g = ct.data()[y * w + x];
                let px = &xd[(y * w + x) * 3..(y * w + x) * 3 + 3];
                let out = &mut gx.data_mut()[(y * iw + x) * 3..(y * iw + x) * 3 + 3];
                for c in 0..k {
                    let wq = self.weights[q][c];
                    let e = self.eff[c];
                    if wq != 0.0 {
                        for i in 0..3 {
                            out[i] += g * wq * e[i];
                            gresp[c][i] += g * wq * px[i];
                        }
                    }
                    if self.stage.soft_selection {
                        d[q][c] += g * (px[0] * e[0] + px[1] * e[1] + px[2] * e[2]);
                    }
                }
            }
        }
        let mut gr = Tensor::zeros(&[k, 3]);
        for c in 0..k {
            for i in 0..3 {
                gr.data_mut()[c * 3 + i] = gresp[c][i] * sigmoid(self.logits[c * 3 + i]);
            }
        }
        grads.accumulate(RESPONSE_PARAM, &gr);
        if self.stage.soft_selection {
            let mut gs = Tensor::zeros(&[4, k]);
            for q in 0..4 {
                let wd: f64 = (0..k).map(|c| self.weights[q][c] * d[q][c]).sum();
                for c in 0..k {
                    gs.data_mut()[q * k + c] = self.weights[q][c] * (d[q][c] - wd) / self.stage.tau;
                }
            }
            grads.accumulate(SELECTION_PARAM, &gs);
        }
        Ok(gx)
    }
}

impl Stage for CfaStage {
    fn name(&self) -> &str {
        "mosaic"
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = vec![String::from(RESPONSE_PARAM)];
        if self.soft_selection {
            v.push(SELECTION_PARAM.into());
        }
        v
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let (ih, iw, c) = input.hwc()?;
        if c != 3 {
            return Err(Error::shape("mosaic input channels", &[3], &[c]));
        }
        if (ih % 2 != 0 || iw % 2 != 0) && !self.allow_crop {
            return Err(Error::invalid("mosaic input", "height and width must be even"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau_pi", "must be > 0"));
        }
        let (h, w) = (ih - ih % 2, iw - iw % 2);
        let resp = params.get(RESPONSE_PARAM)?;
        resp.expect_shape(RESPONSE_PARAM, &[self.classes, 3])?;
        let logits = resp.data().to_vec();
        let eff: Vec<[f64; 3]> = (0..self.classes)
            .map(|k| [softplus(logits[k * 3]), softplus(logits[k * 3 + 1]), softplus(logits[k * 3 + 2])])
            .collect();
        let weights = self.weights(params)?;
        // Effective per-cell response.
        let cell_resp: Vec<[f64; 3]> = (0..4)
            .map(|q| {
                let mut r = [0.0; 3];
                for (k, e) in eff.iter().enumerate() {
                    for i in 0..3 {
                        r[i] += weights[q][k] * e[i];
                    }
                }
                r
            })
            .collect();

        let mut x = Tensor::zeros(&[h, w, 3]);
        let mut out = Tensor::zeros(&[h, w]);
        let src = input.data();
        for y in 0..h {
            for xx in 0..w {
                let s = &src[(y * iw + xx) * 3..(y * iw + xx) * 3 + 3];
                x.data_mut()[(y * w + xx) * 3..(y * w + xx) * 3 + 3].copy_from_slice(s);
                let r = &cell_resp[(y % 2) * 2 + xx % 2];
                out.data_mut()[y * w + xx] = if self.soft_selection {
                    s[0] * r[0] + s[1] * r[1] + s[2] * r[2]
                } else {
                    // exact channel selection when the response is one-hot
                    let mut acc = 0.0;
                    for i in 0..3 {
                        if r[i] != 0.0 {
                            acc += s[i] * r[i];
                        }
                    }
                    acc
                };
            }
        }
        Ok((
            out,
            Box::new(CfaAdj {
                stage: self,
                x,
                in_shape: (ih, iw),
                logits,
                eff,
                weights,
            }),
        ))
    }
}
