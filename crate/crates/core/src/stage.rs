//! Stage-level reverse mode.
//!
//! The pipeline is a short fixed chain, so differentiation works at stage
//! granularity: every [`Stage`] returns its output together with an
//! [`Adjoint`] closure over whatever it cached, and a [`Tape`] replays those
//! adjoints in reverse order.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::rng::RngKey;
use crate::tensor::Tensor;

/// Backward map of one stage application.
///
/// Must be linear in `cotangent`. Parameter cotangents are added into
/// `grads`; the returned tensor is the cotangent of the stage input.
pub trait Adjoint {
    fn backward(&self, cotangent: &Tensor, grads: &mut Grads) -> Result<Tensor>;
}

pub trait Stage {
    fn name(&self) -> &str;

    /// Stages that draw random numbers need a key to be replayable.
    fn is_stochastic(&self) -> bool {
        false
    }

    /// The backward map is a surrogate (straight-through), not the derivative.
    fn is_straight_through(&self) -> bool {
        false
    }

    /// Names of the parameters this stage reads.
    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        key: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)>;
}

/// Stable 32-bit id derived from a stage name, used to key its rng stream.
pub fn stage_id(name: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in name.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

pub struct Tape<'a> {
    entries: Vec<(String, Box<dyn Adjoint + 'a>)>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, adjoint: Box<dyn Adjoint + 'a>) {
        self.entries.push((name.to_owned(), adjoint));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Runs every adjoint in reverse order; returns the input cotangent.
    pub fn backward(&self, cotangent: Tensor, grads: &mut Grads) -> Result<Tensor> {
        let mut ct = cotangent;
        for (name, adj) in self.entries.iter().rev() {
            ct = adj.backward(&ct, grads)?;
            if !ct.all_finite() {
                return Err(Error::NonFinite(alloc::format!("{name} (backward)")));
            }
        }
        Ok(ct)
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Applies one stage, recording it on the tape and checking the output.
pub fn apply<'a>(
    tape: &mut Tape<'a>,
    prev: &str,
    stage: &'a dyn Stage,
    input: &Tensor,
    params: &'a ParamSet,
    key: Option<RngKey>,
) -> Result<Tensor> {
    let key = key.map(|k| k.for_stage(stage_id(stage.name())));
    if stage.is_stochastic() && key.is_none() {
        return Err(Error::NeedsKey {
            stage: stage.name().into(),
        });
    }
    let (out, adj) = stage.forward(input, params, key).map_err(|e| match e {
        e @ Error::Shape { .. } => Error::Composition {
            prev: prev.into(),
            next: stage.name().into(),
            source: Box::new(e),
        },
        e => e,
    })?;
    if !out.all_finite() {
        return Err(Error::NonFinite(stage.name().into()));
    }
    tape.push(stage.name(), adj);
    Ok(out)
}

/// Forward through a chain of stages, recording a tape.
pub fn run_forward<'a>(
    stages: &[&'a dyn Stage],
    input: &Tensor,
    params: &'a ParamSet,
    key: Option<RngKey>,
) -> Result<(Tensor, Tape<'a>)> {
    let mut tape = Tape::new();
    let mut x = input.clone();
    let mut prev = "input";
    for stage in stages {
        x = apply(&mut tape, prev, *stage, &x, params, key)?;
        prev = stage.name();
    }
    Ok((x, tape))
}

/// Output of [`forward_backward`].
pub struct ForwardBackward {
    pub output: Tensor,
    pub input_grad: Tensor,
    pub grads: Grads,
}

/// Forward through `stages`, then pull `cotangent` back to the input and to
/// every parameter. Frozen parameters receive zero cotangents.
pub fn forward_backward(
    stages: &[&dyn Stage],
    input: &Tensor,
    params: &ParamSet,
    key: Option<RngKey>,
    cotangent: &Tensor,
) -> Result<ForwardBackward> {
    let (output, tape) = run_forward(stages, input, params, key)?;
    output.expect_shape("output cotangent", cotangent.shape())?;
    let mut grads = params.zero_grads();
    let input_grad = tape.backward(cotangent.clone(), &mut grads)?;
    grads.mask_frozen(params);
    Ok(ForwardBackward {
        output,
        input_grad,
        grads,
    })
}

/// Stages used by tests and the gradient checker.
pub mod basic {
    use super::*;

    /// `y = x`.
    pub struct Identity;

    struct IdentityAdj;

    impl Adjoint for IdentityAdj {
        fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
            Ok(ct.clone())
        }
    }

    impl Stage for Identity {
        fn name(&self) -> &str {
            "identity"
        }

        fn forward<'a>(
            &'a self,
            input: &Tensor,
            _: &'a ParamSet,
            _: Option<RngKey>,
        ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
            Ok((input.clone(), Box::new(IdentityAdj)))
        }
    }

    /// `y = x²` elementwise.
    pub struct Square;

    struct SquareAdj(Tensor);

    impl Adjoint for SquareAdj {
        fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
            let mut g = ct.clone();
            for (gi, xi) in g.data_mut().iter_mut().zip(self.0.data()) {
                *gi *= 2.0 * xi;
            }
            Ok(g)
        }
    }

    impl Stage for Square {
        fn name(&self) -> &str {
            "square"
        }

        fn forward<'a>(
            &'a self,
            input: &Tensor,
            _: &'a ParamSet,
            _: Option<RngKey>,
        ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
            Ok((input.map(|v| v * v), Box::new(SquareAdj(input.clone()))))
        }
    }

    /// `y = a ⊙ x + b` with parameters `a` and `b` of the input's shape.
    pub struct Affine {
        pub name: String,
        pub scale: String,
        pub bias: String,
    }

    struct AffineAdj<'a> {
        x: Tensor,
        a: &'a Tensor,
        scale: &'a str,
        bias: &'a str,
    }

    impl Adjoint for AffineAdj<'_> {
        fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
            let mut ga = ct.clone();
            ga.data_mut()
                .iter_mut()
                .zip(self.x.data())
                .for_each(|(g, x)| *g *= x);
            grads.accumulate(self.scale, &ga);
            grads.accumulate(self.bias, ct);
            let mut gx = ct.clone();
            gx.data_mut()
                .iter_mut()
                .zip(self.a.data())
                .for_each(|(g, a)| *g *= a);
            Ok(gx)
        }
    }

    impl Stage for Affine {
        fn name(&self) -> &str {
            &self.name
        }

        fn param_names(&self) -> Vec<String> {
            alloc::vec![self.scale.clone(), self.bias.clone()]
        }

        fn forward<'a>(
            &'a self,
            input: &Tensor,
            params: &'a ParamSet,
            _: Option<RngKey>,
        ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
            let a = params.get(&self.scale)?;
            let b = params.get(&self.bias)?;
            input.expect_shape(&self.name, a.shape())?;
            let mut y = input.clone();
            for ((y, a), b) in y.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *y = *y * a + b;
            }
            if y.data().iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite(self.name.clone()));
            }
            Ok((
                y,
                Box::new(AffineAdj {
                    x: input.clone(),
                    a,
                    scale: &self.scale,
                    bias: &self.bias,
                }),
            ))
        }
    }

    /// `y = tanh(x)`.
    pub struct Tanh;

    struct TanhAdj(Tensor);

    impl Adjoint for TanhAdj {
        fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
            let mut g = ct.clone();
            for (gi, yi) in g.data_mut().iter_mut().zip(self.0.data()) {
                *gi *= 1.0 - yi * yi;
            }
            Ok(g)
        }
    }

    impl Stage for Tanh {
        fn name(&self) -> &str {
            "tanh"
        }

        fn forward<'a>(
            &'a self,
            input: &Tensor,
            _: &'a ParamSet,
            _: Option<RngKey>,
        ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
            let y = input.map(num_traits::Float::tanh);
            Ok((y.clone(), Box::new(TanhAdj(y))))
        }
    }
}
