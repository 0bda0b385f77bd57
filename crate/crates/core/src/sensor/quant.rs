//! Frame-normalized quantizer `floor(2^b * R / max(R)) / 2^b` with a
//! straight-through (identity) backward.

use alloc::boxed::Box;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

pub fn validate_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::invalid("bits", "must lie in 1..=16"));
    }
    Ok(())
}

/// Quantizes against the frame maximum. Levels are clamped to `[0, 2^b]`,
/// so negative (noisy) inputs map to 0.
pub fn quantize(raw: &Tensor, bits: u32) -> Result<Tensor> {
    validate_bits(bits)?;
    let m = raw.max();
    if !(m > 0.0) {
        return Err(Error::invalid("raw", "frame maximum must be positive"));
    }
    let levels = (1u32 << bits) as f64;
    Ok(raw.map(|v| ((levels * (v / m)).floor().clamp(0.0, levels)) / levels))
}

pub struct QuantStage {
    pub bits: u32,
}

struct Straight;

impl Adjoint for Straight {
    fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
        Ok(ct.clone())
    }
}

impl Stage for QuantStage {
    fn name(&self) -> &str {
        "quantize"
    }

    fn is_straight_through(&self) -> bool {
        true
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        _: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        Ok((quantize(input, self.bits)?, Box::new(Straight)))
    }
}
