//! Compact encoder-decoder segmentation network.

pub mod blocks;
pub mod layers;
mod net;

pub use blocks::{DsBlockStage, SeBlockStage};
pub use net::{build, NetCache, SegNet, SegNetConfig, SegNetStage, GN_GROUPS};
