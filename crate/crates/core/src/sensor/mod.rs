//! Sensor front end: exposure gain, colour-filter mosaic, Poisson-Gaussian
//! noise and a straight-through quantizer.

pub mod cfa;
pub mod exposure;
pub mod noise;
pub mod quant;

pub use cfa::{init_cfa, CfaLayout, CfaModel, CfaStage};
pub use exposure::{exposure_gain, ExposureStage};
pub use noise::{NoiseParams, NoiseStage};
pub use quant::{quantize, QuantStage};

#[allow(unused_imports)]
use num_traits::Float;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, exact zero far below the origin.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logit whose softplus is `y` (nearest representable), for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    let x0 = y + (-(-y).exp_m1()).ln();
    // Walk a few ulps to land exactly on `y` when the grid allows it.
    let mut best = x0;
    let mut x = x0;
    for _ in 0..8 {
        x = f64::from_bits(x.to_bits() - 1);
    }
    for _ in 0..17 {
        if (softplus(x) - y).abs() < (softplus(best) - y).abs() {
            best = x;
        }
        x = f64::from_bits(x.to_bits() + 1);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for y in [1.0, 1.0 / 3.0, 0.5, 2.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() <= f64::EPSILON * y);
        }
        assert_eq!(softplus(inverse_softplus(1.0)), 1.0);
        assert_eq!(softplus(-1000.0), 0.0);
    }
}
