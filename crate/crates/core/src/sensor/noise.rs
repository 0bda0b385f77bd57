//! Poisson-Gaussian sensor noise, reparameterized:
//! `R' = R + sigma_s * sqrt(max(R, floor)) * e1 + sigma_r * e2`.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::params::{Grads, Group, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

pub const SIGMA_S_PARAM: &str = "sensor.sigma_s";
pub const SIGMA_R_PARAM: &str = "sensor.sigma_r";
pub const SIGNAL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub sigma_s: f64,
    pub sigma_r: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_s: 0.015,
            sigma_r: 0.002,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s >= 0.0) {
            return Err(Error::invalid("sigma_s", "must be >= 0"));
        }
        if !(self.sigma_r >= 0.0) {
            return Err(Error::invalid("sigma_r", "must be >= 0"));
        }
        Ok(())
    }

    /// Registers both sigmas as (by default untrainable) sensor parameters.
    pub fn register(&self, params: &mut ParamSet, trainable: bool) -> Result<()> {
        self.validate()?;
        params.insert(SIGMA_S_PARAM, Group::Sensor, trainable, Tensor::scalar(self.sigma_s))?;
        params.insert(SIGMA_R_PARAM, Group::Sensor, trainable, Tensor::scalar(self.sigma_r))
    }

    /// Per-pixel variance of the added noise at signal `r`.
    pub fn variance(&self, r: f64) -> f64 {
        self.sigma_s * self.sigma_s * r.max(SIGNAL_FLOOR) + self.sigma_r * self.sigma_r
    }
}

/// Standard normal draws `(e1, e2)` for `n` pixels under `key`.
pub fn draw(key: RngKey, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = key.with_stream(0).rng();
    let mut b = key.with_stream(1).rng();
    ((0..n).map(|_| a.normal()).collect(), (0..n).map(|_| b.normal()).collect())
}

/// Adds noise with explicit sigmas; the result is a pure function of `key`.
pub fn add_noise(raw: &Tensor, n: NoiseParams, key: RngKey) -> Result<Tensor> {
    n.validate()?;
    if n.sigma_s == 0.0 && n.sigma_r == 0.0 {
        return Ok(raw.clone());
    }
    let (e1, e2) = draw(key, raw.len());
    let mut out = raw.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += n.sigma_s * v.max(SIGNAL_FLOOR).sqrt() * e1[i] + n.sigma_r * e2[i];
    }
    Ok(out)
}

/// Noise stage reading both sigmas from the parameter set.
#[derive(Debug, Default)]
pub struct NoiseStage;

struct NoiseAdj {
    r: Tensor,
    e1: Vec<f64>,
    e2: Vec<f64>,
    sigma_s: f64,
}

impl Adjoint for NoiseAdj {
    fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let mut gr = ct.clone();
        let (mut gs, mut gread) = (0.0, 0.0);
        for (i, g) in gr.data_mut().iter_mut().enumerate() {
            let r = self.r[i];
            let root = r.max(SIGNAL_FLOOR).sqrt();
            gs += *g * root * self.e1[i];
            gread += *g * self.e2[i];
            if r > SIGNAL_FLOOR {
                *g *= 1.0 + self.sigma_s * self.e1[i] * 0.5 / root;
            }
        }
        grads.accumulate(SIGMA_S_PARAM, &Tensor::scalar(gs));
        grads.accumulate(SIGMA_R_PARAM, &Tensor::scalar(gread));
        Ok(gr)
    }
}

impl Stage for NoiseStage {
    fn name(&self) -> &str {
        "noise"
    }

    fn is_stochastic(&self) -> bool {
        true
    }

    fn param_names(&self) -> Vec<String> {
        vec![SIGMA_S_PARAM.into(), SIGMA_R_PARAM.into()]
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        key: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let key = key.ok_or_else(|| Error::NeedsKey { stage: "noise".into() })?;
        let n = NoiseParams {
            sigma_s: params.get(SIGMA_S_PARAM)?[0],
            sigma_r: params.get(SIGMA_R_PARAM)?[0],
        };
        n.validate()?;
        let (e1, e2) = draw(key, input.len());
        let mut out = input.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += n.sigma_s * v.max(SIGNAL_FLOOR).sqrt() * e1[i] + n.sigma_r * e2[i];
        }
        Ok((
            out,
            Box::new(NoiseAdj {
                r: input.clone(),
                e1,
                e2,
                sigma_s: n.sigma_s,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let r = Tensor::from_fn(&[4, 4], |i| i as f64 / 16.0);
        let out = add_noise(&r, NoiseParams { sigma_s: 0.0, sigma_r: 0.0 }, RngKey::new(1)).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn same_key_is_bitwise_identical() {
        let r = Tensor::full(&[8, 8], 0.3);
        let k = RngKey::new(3).at_step(9);
        let a = add_noise(&r, NoiseParams::default(), k).unwrap();
        let b = add_noise(&r, NoiseParams::default(), k).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&r, NoiseParams::default(), k.at_step(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negative_sigma_rejected() {
        let r = Tensor::full(&[2, 2], 0.3);
        assert!(add_noise(&r, NoiseParams { sigma_s: -0.1, sigma_r: 0.0 }, RngKey::new(0)).is_err());
    }

    #[test]
    fn variance_at_quarter_signal() {
        let n = NoiseParams::default();
        assert!((n.variance(0.25) - 6.025e-5).abs() < 1e-18);
    }
}
