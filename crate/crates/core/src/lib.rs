//! Differentiable RAW-to-task camera pipeline.
//!
//! Every stage of the chain
//!
//! ```text
//! radiance -> optics -> exposure -> CFA mosaic -> noise -> quantizer -> segmentation net
//! ```
//!
//! is implemented with an explicit forward map and a hand-written adjoint, so
//! gradients of a segmentation loss reach the lens (Zernike coefficients), the
//! exposure gain, the colour-filter responses and the network weights alike.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, PNG IO and the
//! command-line front end live in the `rawtask` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod segnet;
pub mod sensor;
pub mod stage;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Grads, Group, ParamSet};
pub use rng::RngKey;
pub use stage::{Adjoint, Stage};
pub use tensor::Tensor;
