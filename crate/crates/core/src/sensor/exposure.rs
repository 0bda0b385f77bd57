//! Learnable global gain `alpha(gamma) = 0.25 + 3.75 * sigmoid(gamma)`.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::sigmoid;
use crate::error::Result;
use crate::params::{Grads, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

pub const GAIN_MIN: f64 = 0.25;
pub const GAIN_SPAN: f64 = 3.75;
pub const GAMMA_PARAM: &str = "sensor.gamma";

pub fn exposure_gain(gamma: f64) -> f64 {
    GAIN_MIN + GAIN_SPAN * sigmoid(gamma)
}

pub fn exposure_gain_derivative(gamma: f64) -> f64 {
    let s = sigmoid(gamma);
    GAIN_SPAN * s * (1.0 - s)
}

/// `gamma` giving gain `alpha`, for `alpha` in (0.25, 4).
pub fn gamma_for_gain(alpha: f64) -> f64 {
    let s = (alpha - GAIN_MIN) / GAIN_SPAN;
    num_traits::Float::ln(s / (1.0 - s))
}

/// Applies the gain and clamps to `[0, 1]`. Gradients flow where the gained
/// value lies in `[0, 1)`.
pub struct ExposureStage {
    pub param: String,
}

impl Default for ExposureStage {
    fn default() -> Self {
        Self {
            param: GAMMA_PARAM.into(),
        }
    }
}

struct ExposureAdj<'a> {
    x: Tensor,
    alpha: f64,
    dalpha: f64,
    param: &'a str,
}

impl Adjoint for ExposureAdj<'_> {
    fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let mut gx = Tensor::zeros(ct.shape());
        let mut ggamma = 0.0;
        for ((g, &x), out) in ct.data().iter().zip(self.x.data()).zip(gx.data_mut()) {
            let y = self.alpha * x;
            if (0.0..1.0).contains(&y) {
                *out = g * self.alpha;
                ggamma += g * x * self.dalpha;
            }
        }
        grads.accumulate(self.param, &Tensor::scalar(ggamma));
        Ok(gx)
    }
}

impl Stage for ExposureStage {
    fn name(&self) -> &str {
        "exposure"
    }

    fn param_names(&self) -> Vec<String> {
        vec![self.param.clone()]
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let p = params.param(&self.param)?;
        let gamma = p.value[0];
        let alpha = exposure_gain(gamma);
        let y = input.map(|v| (alpha * v).clamp(0.0, 1.0));
        Ok((
            y,
            Box::new(ExposureAdj {
                x: input.clone(),
                alpha,
                dalpha: exposure_gain_derivative(gamma),
                param: &self.param,
            }),
        ))
    }
}
