//! Tiled, spatially varying convolution of a radiance image with a PSF grid.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use super::psf::{PsfCache, PsfConfig, PsfKernel, PupilBasis};
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::params::{Grads, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

/// Reflect an index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Tile boundaries: tile `t` of `g` over `n` samples spans `[b[t], b[t+1])`.
pub fn tile_bounds(n: usize, g: usize) -> Vec<usize> {
    (0..=g).map(|t| (t * n + g / 2) / g).collect()
}

/// Kernels for a `gy x gx` tiling. With `channels == 1` every image channel
/// shares the tile kernel; otherwise kernel `(tile, c)` is at
/// `tile * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfGrid {
    pub gy: usize,
    pub gx: usize,
    pub channels: usize,
    pub kernels: Vec<PsfKernel>,
}

impl PsfGrid {
    pub fn uniform(kernel: PsfKernel) -> Self {
        Self {
            gy: 1,
            gx: 1,
            channels: 1,
            kernels: vec![kernel],
        }
    }

    pub fn new(gy: usize, gx: usize, channels: usize, kernels: Vec<PsfKernel>) -> Result<Self> {
        if gy == 0 || gx == 0 || channels == 0 {
            return Err(Error::invalid("psf grid", "dimensions must be >= 1"));
        }
        if kernels.len() != gy * gx * channels {
            return Err(Error::shape("psf grid", &[gy, gx, channels], &[kernels.len()]));
        }
        let k = kernels[0].size();
        if kernels.iter().any(|kk| kk.size() != k) {
            return Err(Error::invalid("psf grid", "kernels must share one size"));
        }
        Ok(Self {
            gy,
            gx,
            channels,
            kernels,
        })
    }

    pub fn kernel(&self, tile: usize, channel: usize) -> &PsfKernel {
        let c = if self.channels == 1 { 0 } else { channel };
        &self.kernels[tile * self.channels + c]
    }

    fn kernel_index(&self, tile: usize, channel: usize) -> usize {
        tile * self.channels + if self.channels == 1 { 0 } else { channel }
    }
}

struct TileGeom {
    y0: usize,
    x0: usize,
    th: usize,
    tw: usize,
    /// Patch extent including the reflected halo.
    ph: usize,
    pw: usize,
}

/// Cached spectra for the backward pass of [`render_grid`].
pub struct RenderCache {
    shape: (usize, usize, usize),
    radius: usize,
    tiles: Vec<TileGeom>,
    ffts: Vec<Fft2>,
    /// Per (tile, channel): spectrum of the padded input patch.
    patch_hat: Vec<Vec<Complex64>>,
    /// Per (tile, channel): spectrum of the kernel.
    kernel_hat: Vec<Vec<Complex64>>,
    kernel_count: usize,
    grid_channels: usize,
}

fn tiles_for(h: usize, w: usize, grid: &PsfGrid, r: usize) -> Vec<TileGeom> {
    let by = tile_bounds(h, grid.gy);
    let bx = tile_bounds(w, grid.gx);
    let mut out = Vec::with_capacity(grid.gy * grid.gx);
    for ty in 0..grid.gy {
        for tx in 0..grid.gx {
            let th = by[ty + 1] - by[ty];
            let tw = bx[tx + 1] - bx[tx];
            out.push(TileGeom {
                y0: by[ty],
                x0: bx[tx],
                th,
                tw,
                ph: th + 2 * r,
                pw: tw + 2 * r,
            });
        }
    }
    out
}

fn kernel_spectrum(kernel: &PsfKernel, fft: &Fft2) -> Vec<Complex64> {
    let (my, mx) = fft.shape();
    let k = kernel.size();
    let mut buf = vec![Complex64::new(0.0, 0.0); my * mx];
    for i in 0..k {
        for j in 0..k {
            buf[i * mx + j] = Complex64::new(kernel.at(i, j), 0.0);
        }
    }
    fft.forward(&mut buf);
    buf
}

/// Convolves each channel of `image` (`[H, W, C]`) with its tile's kernel
/// using FFTs and reflect padding at the frame border.
pub fn render_grid(image: &Tensor, grid: &PsfGrid) -> Result<(Tensor, RenderCache)> {
    let (h, w, c) = image.hwc()?;
    if grid.gy > h || grid.gx > w {
        return Err(Error::invalid("psf grid", "more tiles than pixels"));
    }
    if grid.channels != 1 && grid.channels != c {
        return Err(Error::shape("psf grid channels", &[c], &[grid.channels]));
    }
    let r = grid.kernels[0].radius();
    let tiles = tiles_for(h, w, grid, r);
    let src = image.data();
    let mut out = Tensor::zeros(image.shape());
    let mut ffts = Vec::with_capacity(tiles.len());
    let mut patch_hat = Vec::with_capacity(tiles.len() * c);
    let mut kernel_hat = vec![Vec::new(); grid.kernels.len()];

    for (t, tile) in tiles.iter().enumerate() {
        let fft = Fft2::new(tile.ph.next_power_of_two(), tile.pw.next_power_of_two());
        let (my, mx) = fft.shape();
        for ch in 0..c {
            let ki = grid.kernel_index(t, ch);
            if kernel_hat[ki].is_empty() {
                kernel_hat[ki] = kernel_spectrum(&grid.kernels[ki], &fft);
            }
            let mut buf = vec![Complex64::new(0.0, 0.0); my * mx];
            for py in 0..tile.ph {
                let sy = reflect(tile.y0 as isize + py as isize - r as isize, h);
                for px in 0..tile.pw {
                    let sx = reflect(tile.x0 as isize + px as isize - r as isize, w);
                    buf[py * mx + px].re = src[(sy * w + sx) * c + ch];
                }
            }
            fft.forward(&mut buf);
            let ph_hat = buf.clone();
            for (b, k) in buf.iter_mut().zip(&kernel_hat[ki]) {
                *b *= k;
            }
            fft.inverse(&mut buf);
            let dst = out.data_mut();
            for i in 0..tile.th {
                for j in 0..tile.tw {
                    dst[((tile.y0 + i) * w + tile.x0 + j) * c + ch] = buf[(i + 2 * r) * mx + j + 2 * r].re;
                }
            }
            patch_hat.push(ph_hat);
        }
        ffts.push(fft);
    }
    Ok((
        out,
        RenderCache {
            shape: (h, w, c),
            radius: r,
            tiles,
            ffts,
            patch_hat,
            kernel_hat,
            kernel_count: grid.kernels.len(),
            grid_channels: grid.channels,
        },
    ))
}

impl RenderCache {
    /// Returns the image cotangent and one cotangent per grid kernel.
    pub fn backward(&self, ct: &Tensor, want_kernels: bool) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let (h, w, c) = self.shape;
        ct.expect_shape("render cotangent", &[h, w, c])?;
        let r = self.radius;
        let k = 2 * r + 1;
        let g = ct.data();
        let mut gx = Tensor::zeros(&[h, w, c]);
        let mut gk = vec![vec![0.0; k * k]; if want_kernels { self.kernel_count } else { 0 }];
        for (t, tile) in self.tiles.iter().enumerate() {
            let fft = &self.ffts[t];
            let (my, mx) = fft.shape();
            for ch in 0..c {
                let ki = t * self.grid_channels + if self.grid_channels == 1 { 0 } else { ch };
                let mut gy = vec![Complex64::new(0.0, 0.0); my * mx];
                for i in 0..tile.th {
                    for j in 0..tile.tw {
                        gy[(i + 2 * r) * mx + j + 2 * r].re = g[((tile.y0 + i) * w + tile.x0 + j) * c + ch];
                    }
                }
                fft.forward(&mut gy);

                if want_kernels {
                    let ph = &self.patch_hat[t * c + ch];
                    let mut corr: Vec<Complex64> = gy.iter().zip(ph).map(|(a, b)| a * b.conj()).collect();
                    fft.inverse(&mut corr);
                    let slot = &mut gk[ki];
                    for i in 0..k {
                        for j in 0..k {
                            slot[i * k + j] += corr[i * mx + j].re;
                        }
                    }
                }

                let kh = &self.kernel_hat[ki];
                for (a, b) in gy.iter_mut().zip(kh) {
                    *a *= b.conj();
                }
                fft.inverse(&mut gy);
                let dst = gx.data_mut();
                for py in 0..tile.ph {
                    let sy = reflect(tile.y0 as isize + py as isize - r as isize, h);
                    for px in 0..tile.pw {
                        let sx = reflect(tile.x0 as isize + px as isize - r as isize, w);
                        dst[(sy * w + sx) * c + ch] += gy[py * mx + px].re;
                    }
                }
            }
        }
        Ok((gx, gk))
    }
}

/// Lens geometry the optics stage needs; coefficients live in the [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpticsModel {
    pub grid: (usize, usize),
    pub modes: usize,
    /// `lambda_ref / lambda` per image channel.
    pub wave_scales: Vec<f64>,
    pub psf: PsfConfig,
}

/// Optics stage `O_theta`. `model == None` is the identity lens.
pub struct RenderStage {
    pub model: Option<OpticsModel>,
    pub param: String,
    basis: Option<PupilBasis>,
}

pub const ZERNIKE_PARAM: &str = "optics.zernike";

impl RenderStage {
    pub fn new(model: Option<OpticsModel>) -> Result<Self> {
        let basis = match &model {
            Some(m) => {
                m.psf.validate()?;
                Some(PupilBasis::new(m.psf.pupil_samples, m.modes)?)
            }
            None => None,
        };
        Ok(Self {
            model,
            param: ZERNIKE_PARAM.into(),
            basis,
        })
    }

    pub fn identity() -> Self {
        Self {
            model: None,
            param: ZERNIKE_PARAM.into(),
            basis: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.model.is_none()
    }

    /// Synthesizes the per-tile, per-channel PSF grid for the current
    /// coefficients.
    pub fn psf_grid(&self, params: &ParamSet) -> Result<Option<(PsfGrid, Vec<PsfCache>)>> {
        let (Some(model), Some(basis)) = (&self.model, &self.basis) else {
            return Ok(None);
        };
        let coeffs = params.get(&self.param)?;
        let tiles = model.grid.0 * model.grid.1;
        coeffs.expect_shape(&self.param, &[tiles, model.modes])?;
        let channels = model.wave_scales.len();
        let mut kernels = Vec::with_capacity(tiles * channels);
        let mut caches = Vec::with_capacity(tiles * channels);
        for t in 0..tiles {
            let c = &coeffs.data()[t * model.modes..(t + 1) * model.modes];
            for &s in &model.wave_scales {
                let (k, cache) = basis.synthesize(c, s, model.psf.kernel_size)?;
                kernels.push(k);
                caches.push(cache);
            }
        }
        let grid = PsfGrid::new(model.grid.0, model.grid.1, channels, kernels)?;
        Ok(Some((grid, caches)))
    }
}

struct RenderAdj<'a> {
    stage: &'a RenderStage,
    cache: RenderCache,
    psf: Vec<PsfCache>,
    train_lens: bool,
}

impl Adjoint for RenderAdj<'_> {
    fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let (gx, gk) = self.cache.backward(ct, self.train_lens)?;
        if self.train_lens {
            let model = self.stage.model.as_ref().expect("lens present");
            let basis = self.stage.basis.as_ref().expect("lens present");
            let channels = model.wave_scales.len();
            let tiles = model.grid.0 * model.grid.1;
            let mut g = Tensor::zeros(&[tiles, model.modes]);
            for (i, (cache, gker)) in self.psf.iter().zip(&gk).enumerate() {
                let t = i / channels;
                let gc = basis.backward(cache, gker);
                for (slot, v) in g.data_mut()[t * model.modes..].iter_mut().zip(gc) {
                    *slot += v;
                }
            }
            grads.accumulate(&self.stage.param, &g);
        }
        Ok(gx)
    }
}

struct PassThrough;

impl Adjoint for PassThrough {
    fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
        Ok(ct.clone())
    }
}

impl Stage for RenderStage {
    fn name(&self) -> &str {
        "render"
    }

    fn param_names(&self) -> Vec<String> {
        if self.model.is_some() {
            vec![self.param.clone()]
        } else {
            Vec::new()
        }
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let Some((grid, psf)) = self.psf_grid(params)? else {
            return Ok((input.clone(), Box::new(PassThrough)));
        };
        let (_, _, c) = input.hwc()?;
        if grid.channels != 1 && grid.channels != c {
            return Err(Error::shape("render channels", &[grid.channels], &[c]));
        }
        let (out, cache) = render_grid(input, &grid)?;
        let train_lens = params.param(&self.param)?.updates();
        Ok((
            out,
            Box::new(RenderAdj {
                stage: self,
                cache,
                psf,
                train_lens,
            }),
        ))
    }
}

/// Rescales an image to mean 0.5.
pub struct NormalizeStage;

pub const MEAN_FLOOR: f64 = 1e-6;

pub fn normalize_render(image: &Tensor) -> Result<Tensor> {
    let mean = image.mean();
    if !(mean > MEAN_FLOOR) {
        return Err(Error::invalid("image", "mean at or below floor (black frame)"));
    }
    Ok(image.map(|v| v * (0.5 / mean)))
}

struct NormalizeAdj {
    x: Tensor,
    mean: f64,
}

impl Adjoint for NormalizeAdj {
    fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
        // y_i = 0.5 x_i / mu, mu = mean(x)
        let n = self.x.len() as f64;
        let s = 0.5 / self.mean;
        let corr = ct.dot(&self.x) * 0.5 / (self.mean * self.mean * n);
        Ok(ct.map(|g| g * s - corr))
    }
}

impl Stage for NormalizeStage {
    fn name(&self) -> &str {
        "normalize_render"
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        _: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let y = normalize_render(input)?;
        Ok((
            y,
            Box::new(NormalizeAdj {
                x: input.clone(),
                mean: input.mean(),
            }),
        ))
    }
}
