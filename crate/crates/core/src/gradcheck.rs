//! Central finite-difference verification of stage adjoints.
//!
//! The stage output is projected onto a fixed random direction `r`, giving a
//! scalar `f = <r, stage(x; p)>`. The adjoint applied to `r` must reproduce
//! `df/dx` and `df/dp` as estimated by `(f(+h) - f(-h)) / 2h`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::RngKey;
use crate::stage::{apply, Stage, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    /// `"input"` or a parameter name.
    pub target: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub stage: String,
    pub straight_through: bool,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Seed of the random projection direction.
    pub projection_seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            projection_seed: 0,
        }
    }
}

fn forward_only(stage: &dyn Stage, x: &Tensor, params: &ParamSet, key: Option<RngKey>) -> Result<Tensor> {
    let mut tape = Tape::new();
    apply(&mut tape, "input", stage, x, params, key)
}

/// `max|a - n| / max(max|a|, max|n|, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-6, f64::max);
    diff / scale
}

/// Checks every input entry and every entry of each parameter the stage
/// reads. Straight-through stages are checked for an identity backward
/// instead.
pub fn gradcheck(
    stage: &dyn Stage,
    input: &Tensor,
    params: &ParamSet,
    key: Option<RngKey>,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    if !(opts.h > 0.0) {
        return Err(Error::invalid("h", "must be positive"));
    }
    if stage.is_stochastic() && key.is_none() {
        return Err(Error::NeedsKey {
            stage: stage.name().to_string(),
        });
    }

    let mut tape = Tape::new();
    let y = apply(&mut tape, "input", stage, input, params, key)?;
    let mut prng = RngKey::new(opts.projection_seed).rng();
    let r = Tensor::from_fn(y.shape(), |_| prng.normal());
    let mut grads = params.zero_grads();
    let input_ct = tape.backward(r.clone(), &mut grads)?;
    drop(tape);

    let mut entries = Vec::new();
    if stage.is_straight_through() {
        let err = relative_error(input_ct.data(), r.data());
        entries.push(GradcheckEntry {
            target: "input (straight-through identity)".into(),
            max_rel_err: err,
            passed: input_ct == r,
        });
        return Ok(GradcheckReport {
            stage: stage.name().into(),
            straight_through: true,
            entries,
        });
    }

    let project = |x: &Tensor, ps: &ParamSet| -> Result<f64> {
        Ok(forward_only(stage, x, ps, key)?.dot(&r))
    };

    let mut numeric = Vec::with_capacity(input.len());
    let mut xp = input.clone();
    for i in 0..input.len() {
        let x0 = xp[i];
        xp[i] = x0 + opts.h;
        let fp = project(&xp, params)?;
        xp[i] = x0 - opts.h;
        let fm = project(&xp, params)?;
        xp[i] = x0;
        numeric.push((fp - fm) / (2.0 * opts.h));
    }
    let err = relative_error(input_ct.data(), &numeric);
    entries.push(GradcheckEntry {
        target: "input".into(),
        max_rel_err: err,
        passed: err < opts.tol,
    });

    let mut pp = params.clone();
    for name in stage.param_names() {
        let n = params.get(&name)?.len();
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let v0 = pp.get(&name)?[i];
            pp.get_mut(&name)?[i] = v0 + opts.h;
            let fp = project(input, &pp)?;
            pp.get_mut(&name)?[i] = v0 - opts.h;
            let fm = project(input, &pp)?;
            pp.get_mut(&name)?[i] = v0;
            numeric.push((fp - fm) / (2.0 * opts.h));
        }
        let err = relative_error(analytic.data(), &numeric);
        entries.push(GradcheckEntry {
            target: name,
            max_rel_err: err,
            passed: err < opts.tol,
        });
    }

    Ok(GradcheckReport {
        stage: stage.name().into(),
        straight_through: false,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use crate::stage::basic::{Affine, Identity, Tanh};

    #[test]
    fn identity_is_exact() {
        let x = Tensor::from_fn(&[4, 4], |i| i as f64 * 0.1);
        let rep = gradcheck(&Identity, &x, &ParamSet::new(), None, Default::default()).unwrap();
        assert!(rep.passed());
        assert!(rep.max_rel_err() < 1e-9);
    }

    #[test]
    fn affine_and_tanh_pass() {
        let mut ps = ParamSet::new();
        ps.insert("a", Group::Network, true, Tensor::from_fn(&[3], |i| 0.5 + i as f64))
            .unwrap();
        ps.insert("b", Group::Network, true, Tensor::from_fn(&[3], |i| -0.2 * i as f64))
            .unwrap();
        let aff = Affine {
            name: "affine".into(),
            scale: "a".into(),
            bias: "b".into(),
        };
        let x = Tensor::from_fn(&[3], |i| 0.3 - 0.25 * i as f64);
        assert!(gradcheck(&aff, &x, &ps, None, Default::default()).unwrap().passed());
        assert!(gradcheck(&Tanh, &x, &ps, None, Default::default()).unwrap().passed());
    }

    #[test]
    fn rejects_nonpositive_step() {
        let opts = GradcheckOptions {
            h: 0.0,
            ..Default::default()
        };
        assert!(gradcheck(&Identity, &Tensor::scalar(1.0), &ParamSet::new(), None, opts).is_err());
    }
}
