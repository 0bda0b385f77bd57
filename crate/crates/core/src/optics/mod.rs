//! Lens model: Zernike wavefront, PSF synthesis and spatially varying
//! FFT convolution, plus the mean-0.5 render normalization.

pub mod lens;
pub mod psf;
pub mod render;
pub mod zernike;

pub use lens::{load_lens, Lens, LensParams, LoadedLens};
pub use psf::{synthesize_psf, PsfConfig, PsfKernel, PupilBasis};
pub use render::{normalize_render, render_grid, NormalizeStage, OpticsModel, PsfGrid, RenderStage, ZERNIKE_PARAM};
pub use zernike::zernike;
