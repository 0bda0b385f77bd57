use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::model::Pipeline;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamWConfig, OptimState, StepReport};
use crate::params::{Grads, Group, ParamSet};
use crate::rng::RngKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Defaults to `ceil(0.2 * epochs)`.
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub throttle: f64,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Round parameters and moments to 32-bit floats after every step.
    pub f32_storage: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            epochs: 10,
            warmup_epochs: None,
            batch_size: 4,
            tau_start: 1.0,
            tau_end: 0.05,
            throttle: 0.1,
            seed: 0,
            lr: a.lr,
            weight_decay: a.weight_decay,
            f32_storage: true,
        }
    }
}

impl TrainSchedule {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (0.2 * self.epochs as f64).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.warmup() >= self.epochs {
            return Err(Error::invalid("warmup_epochs", "must be < epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::invalid("tau_end", "need tau_start >= tau_end > 0"));
        }
        if !(self.throttle >= 0.0) || !self.throttle.is_finite() {
            return Err(Error::invalid("throttle", "must be a finite value >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    /// Selection temperature during `epoch` (1-based): held at `tau_start`
    /// through warm-up, then exponential decay reaching `tau_end` at the last
    /// epoch.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        let t1 = self.warmup();
        if epoch <= t1 {
            return self.tau_start;
        }
        let frac = (epoch - t1) as f64 / (self.epochs - t1) as f64;
        if frac >= 1.0 {
            return self.tau_end;
        }
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ohem: f64,
    pub l_lovasz: f64,
    pub l_smooth: f64,
    pub l_total: f64,
    pub lr: f64,
    pub tau_pi: f64,
    pub val_miou: f64,
    pub val_pixel_acc: f64,
}

/// Hooks called during [`train`].
pub trait TrainObserver {
    /// After initialization (`epoch == 0`) and after every epoch.
    fn checkpoint(&mut self, _epoch: usize, _params: &ParamSet, _optim: &OptimState) -> Result<()> {
        Ok(())
    }

    fn epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, _epoch: usize, _step: u64, _report: &StepReport) {}
}

pub struct NullObserver;

impl TrainObserver for NullObserver {}

pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub optim: OptimState,
}

fn shuffled(n: usize, key: RngKey) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = key.rng();
    for i in (1..n).rev() {
        let j = r.int(0, i);
        idx.swap(i, j);
    }
    idx
}

/// Two-phase training: warm-up with the optics frozen, then joint training
/// with throttled optics updates and an annealed CFA selection temperature.
pub fn train(
    pipe: &mut Pipeline,
    params: &mut ParamSet,
    train_set: &[Sample],
    val_set: &[Sample],
    sched: &TrainSchedule,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("dataset", "training set is empty"));
    }
    let classes = pipe.cfg.network.num_classes;
    for s in train_set.iter().chain(val_set) {
        s.labels.validate(classes)?;
    }
    if sched.f32_storage {
        params.round_to_f32();
    }
    let mut optim = OptimState::new(sched.adamw(), params);
    observer.checkpoint(0, params, &optim)?;

    let t1 = sched.warmup();
    let per_epoch = sched.steps_per_epoch(train_set.len());
    let total = (per_epoch * sched.epochs) as u64;
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(sched.epochs);
    let eval_set = if val_set.is_empty() { train_set } else { val_set };

    for epoch in 1..=sched.epochs {
        let joint = epoch > t1;
        params.set_group_frozen(Group::Optics, !joint);
        let tau = sched.tau_at(epoch);
        pipe.set_tau(tau)?;
        let order = shuffled(train_set.len(), RngKey::new(sched.seed).at_step(epoch as u64).with_stream(7));
        let (mut so, mut sl, mut ss, mut st) = (0.0, 0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for batch in order.chunks(sched.batch_size) {
            let progress = step as f64 / total as f64;
            lr = cosine_lr(step, total, sched.lr)?;
            let mut grads = Grads::new();
            for (i, &idx) in batch.iter().enumerate() {
                let key = RngKey::new(sched.seed).at_step(step * sched.batch_size as u64 + i as u64);
                let r = pipe.loss_and_grads(&train_set[idx], params, key, progress)?;
                for (name, g) in r.grads.iter() {
                    grads.accumulate(name, g);
                }
                so += r.loss.ohem;
                sl += r.loss.lovasz;
                ss += r.loss.smooth;
                st += r.loss.total;
            }
            grads.scale(1.0 / batch.len() as f64);
            let throttle = sched.throttle;
            let report = optim.step(params, &grads, lr, |g| if g == Group::Optics { throttle } else { 1.0 })?;
            if sched.f32_storage {
                params.round_to_f32();
                optim.round_to_f32();
            }
            step += 1;
            observer.step(epoch, step, &report);
        }
        let n = train_set.len() as f64;
        let val = pipe.evaluate(params, eval_set, None)?;
        let rec = EpochRecord {
            epoch,
            l_ohem: so / n,
            l_lovasz: sl / n,
            l_smooth: ss / n,
            l_total: st / n,
            lr,
            tau_pi: tau,
            val_miou: val.miou,
            val_pixel_acc: val.pixel_acc,
        };
        if !rec.l_total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        observer.epoch(&rec)?;
        observer.checkpoint(epoch, params, &optim)?;
        log.push(rec);
    }
    params.set_group_frozen(Group::Optics, false);
    Ok(TrainOutcome { log, optim })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_defaults() {
        let s = TrainSchedule::default();
        assert_eq!(s.warmup(), 2);
        assert_eq!(s.tau_at(1), 1.0);
        assert_eq!(s.tau_at(2), 1.0);
        assert!((s.tau_at(10) - 0.05).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for e in 1..=10 {
            assert!(s.tau_at(e) <= prev);
            prev = s.tau_at(e);
        }
        let bad = TrainSchedule {
            warmup_epochs: Some(10),
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v = shuffled(10, RngKey::new(1));
        v.sort();
        assert_eq!(v, (0..10).collect::<Vec<_>>());
    }
}
