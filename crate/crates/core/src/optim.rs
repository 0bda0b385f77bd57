//! AdamW with decoupled weight decay, and cosine learning-rate annealing.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::params::{Grads, Group, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// Norm of the update actually applied to each group in one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub optics: f64,
    pub sensor: f64,
    pub network: f64,
}

impl StepReport {
    pub fn group(&self, g: Group) -> f64 {
        match g {
            Group::Optics => self.optics,
            Group::Sensor => self.sensor,
            Group::Network => self.network,
        }
    }

    fn slot(&mut self, g: Group) -> &mut f64 {
        match g {
            Group::Optics => &mut self.optics,
            Group::Sensor => &mut self.sensor,
            Group::Network => &mut self.network,
        }
    }
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    Moments {
                        m: Tensor::zeros(p.value.shape()),
                        v: Tensor::zeros(p.value.shape()),
                    },
                )
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// One AdamW step at learning rate `lr`.
    ///
    /// `group_scale` multiplies the whole update (adaptive term and weight
    /// decay) of a group; a scale of 0 leaves that group bitwise unchanged.
    /// Only trainable, unfrozen parameters move.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &Grads,
        lr: f64,
        group_scale: impl Fn(Group) -> f64,
    ) -> Result<StepReport> {
        if !(lr >= 0.0) {
            return Err(Error::invalid("lr", "must be non-negative"));
        }
        for p in params.iter() {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::shape(&p.name, p.value.shape(), g.shape()));
            }
            if p.updates() && !g.all_finite() {
                return Err(Error::NonFinite(alloc::format!("gradient of {}", p.name)));
            }
        }

        self.step += 1;
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let mut sq = StepReport::default();
        for p in params.iter_mut() {
            if !p.updates() {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            let mom = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(g.shape()),
                    v: Tensor::zeros(g.shape()),
                });
            let scale = group_scale(p.group);
            let mut acc = 0.0;
            let values = p.value.data_mut();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..values.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let delta = scale * lr * (mhat / (vhat.sqrt() + eps) + weight_decay * values[i]);
                values[i] -= delta;
                acc += delta * delta;
            }
            *sq.slot(p.group) += acc;
        }
        Ok(StepReport {
            optics: sq.optics.sqrt(),
            sensor: sq.sensor.sqrt(),
            network: sq.network.sqrt(),
        })
    }

    pub fn round_to_f32(&mut self) {
        for mom in self.moments.values_mut() {
            for t in [&mut mom.m, &mut mom.v] {
                t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(|k| k.as_str())
    }

    pub fn insert_moments(&mut self, name: &str, m: Tensor, v: Tensor) {
        self.moments.insert(name.to_string(), Moments { m, v });
    }
}

/// Cosine annealing from `lr_max` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps", "must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid("step", "exceeds total_steps"));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(0.5 * lr_max * (1.0 + (core::f64::consts::PI * progress).cos()))
}
