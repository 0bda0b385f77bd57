//! Label maps, the synthetic street-scene generator and the corruption suite.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::lens::LensParams;
use crate::optics::psf::PsfConfig;
use crate::optics::render::{render_grid, RenderStage, ZERNIKE_PARAM};
use crate::params::ParamSet;
use crate::rng::{KeyedRng, RngKey};
use crate::sensor::noise::add_noise;
use crate::sensor::NoiseParams;
use crate::stage::stage_id;
use crate::tensor::Tensor;

pub const IGNORE: u8 = 255;

/// `H x W` class indices; 255 marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    /// Checks every label is ignore or below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            Some(v) => Err(Error::invalid("labels", format!("value {v} outside 0..{classes} and not 255"))),
            None => Ok(()),
        }
    }

    pub fn crop(&self, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            data.extend_from_slice(&self.data[y * self.width..y * self.width + w]);
        }
        Self { height: h, width: w, data }
    }
}

/// One labelled training frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` radiance in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

pub const ROAD: u8 = 0;
pub const BUILDING: u8 = 1;
pub const POLE: u8 = 2;
pub const SIGN: u8 = 3;
pub const SKY: u8 = 4;
pub const SCENE_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; SCENE_CLASSES] = ["road", "building", "pole", "sign", "sky"];
pub const MIN_SCENE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub buildings: (usize, usize),
    pub poles: (usize, usize),
    pub signs: (usize, usize),
    /// Global illumination is drawn uniformly from this range.
    pub illumination: (f64, f64),
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            buildings: (2, 4),
            poles: (1, 3),
            signs: (1, 2),
            illumination: (0.2, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SCENE_SIZE || self.width < MIN_SCENE_SIZE {
            return Err(Error::invalid("scene", format!("height and width must be >= {MIN_SCENE_SIZE}")));
        }
        let (lo, hi) = self.illumination;
        if !(0.2 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("illumination", "range must lie within [0.2, 1.0]"));
        }
        for (k, (a, b)) in [("buildings", self.buildings), ("poles", self.poles), ("signs", self.signs)] {
            if a > b {
                return Err(Error::invalid(k, "empty count range"));
            }
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, c: [f64; 3], label: u8) {
        if y < self.h && x < self.w {
            self.rgb[y * self.w + x] = c;
            self.labels[y * self.w + x] = label;
        }
    }
}

fn jitter(rng: &mut KeyedRng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.range(-amount, amount)).clamp(0.0, 1.0))
}

/// Renders a deterministic street scene: sky gradient, roadside buildings,
/// a road trapezoid, thin poles and small signs.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = RngKey::new(spec.seed).for_stage(stage_id("scene")).rng();
    let (hf, wf) = (h as f64, w as f64);
    let mut cv = Canvas {
        h,
        w,
        rgb: vec![[0.0; 3]; h * w],
        labels: vec![SKY; h * w],
    };

    let horizon = (hf * rng.range(0.4, 0.55)) as usize;
    let sky_top = jitter(&mut rng, [0.35, 0.5, 0.85], 0.05);
    let sky_bot = jitter(&mut rng, [0.7, 0.8, 0.95], 0.05);
    for y in 0..horizon {
        let t = y as f64 / horizon.max(1) as f64;
        let c = [0, 1, 2].map(|k| sky_top[k] + t * (sky_bot[k] - sky_top[k]));
        for x in 0..w {
            cv.paint(y, x, c, SKY);
        }
    }

    // roadside structures below the horizon, then buildings rising above it
    let ground = jitter(&mut rng, [0.55, 0.45, 0.35], 0.05);
    for y in horizon..h {
        for x in 0..w {
            cv.paint(y, x, ground, BUILDING);
        }
    }
    let n_build = rng.int(spec.buildings.0, spec.buildings.1);
    for _ in 0..n_build {
        let bw = (wf * rng.range(0.15, 0.35)) as usize;
        let x0 = rng.int(0, w.saturating_sub(bw));
        let top = (hf * rng.range(0.1, 0.3)) as usize;
        let base = [[0.6, 0.45, 0.35], [0.5, 0.5, 0.55], [0.75, 0.65, 0.5]][rng.int(0, 2)];
        let c = jitter(&mut rng, base, 0.05);
        for y in top..horizon + 2 {
            for x in x0..x0 + bw {
                cv.paint(y, x, c, BUILDING);
            }
        }
    }

    let road = jitter(&mut rng, [0.3, 0.3, 0.32], 0.03);
    let cx = wf * rng.range(0.4, 0.6);
    let half_bottom = wf * rng.range(0.4, 0.6);
    let half_top = wf * 0.04;
    for y in horizon..h {
        let t = (y - horizon) as f64 / (h - horizon).max(1) as f64;
        let half = half_top + t * (half_bottom - half_top);
        for x in 0..w {
            if ((x as f64 + 0.5) - cx).abs() <= half {
                cv.paint(y, x, road, ROAD);
            }
        }
    }

    let pole_c = jitter(&mut rng, [0.15, 0.15, 0.17], 0.03);
    let n_poles = rng.int(spec.poles.0, spec.poles.1);
    let mut tops = Vec::with_capacity(n_poles);
    for _ in 0..n_poles {
        let pw = rng.int(1, 2);
        let x0 = rng.int(2, w - 3 - pw);
        let top = (hf * rng.range(0.15, 0.35)) as usize;
        let bottom = (hf * rng.range(0.7, 0.95)) as usize;
        for y in top..bottom {
            for x in x0..x0 + pw {
                cv.paint(y, x, pole_c, POLE);
            }
        }
        tops.push((top, x0));
    }

    let n_signs = rng.int(spec.signs.0, spec.signs.1);
    for i in 0..n_signs {
        let r = rng.int(3, 5) as isize;
        let (sy, sx) = match tops.get(i) {
            Some(&(top, x0)) => (top as isize, x0 as isize),
            None => (rng.int(5, horizon.max(6)) as isize, rng.int(5, w - 6) as isize),
        };
        let base = [[0.9, 0.1, 0.1], [0.1, 0.25, 0.9], [0.95, 0.85, 0.1]][rng.int(0, 2)];
        let c = jitter(&mut rng, base, 0.04);
        let diamond = rng.uniform() < 0.5;
        for dy in -r..=r {
            for dx in -r..=r {
                let inside = if diamond {
                    dy.abs() + dx.abs() <= r
                } else {
                    dy * dy + dx * dx <= r * r
                };
                let (y, x) = (sy + dy, sx + dx);
                if inside && y >= 0 && x >= 0 {
                    cv.paint(y as usize, x as usize, c, SIGN);
                }
            }
        }
    }

    let illum = rng.range(spec.illumination.0, spec.illumination.1);
    let mut img = Tensor::zeros(&[h, w, 3]);
    for (i, px) in cv.rgb.iter().enumerate() {
        for k in 0..3 {
            let texture = 1.0 + 0.04 * rng.normal();
            img[i * 3 + k] = (px[k] * texture * illum).clamp(0.0, illum);
        }
    }
    Ok(Sample {
        image: img,
        labels: LabelMap::new(h, w, cv.labels)?,
    })
}

/// `n` scenes with seeds `seed, seed + 1, ...`.
pub fn generate_scenes(n: usize, seed: u64, height: usize, width: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| generate_scene(&SceneSpec::new(seed.wrapping_add(i as u64), height, width)))
        .collect()
}

/// Robustness corruptions applied to radiance images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionSpec {
    /// Pure defocus blur, in waves.
    Blur { waves: f64 },
    Noise { sigma_s: f64, sigma_r: f64 },
    /// Quantization against a unit full scale.
    Bitdepth { bits: u32 },
    /// Multiplicative gain followed by clamping to `[0, 1]`.
    ExposureShift { gain: f64 },
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CorruptionSpec::Blur { waves } if !waves.is_finite() || waves.abs() > 2.0 => {
                Err(Error::invalid("waves", "must lie in [-2, 2]"))
            }
            CorruptionSpec::Noise { sigma_s, sigma_r } => NoiseParams { sigma_s, sigma_r }.validate(),
            CorruptionSpec::Bitdepth { bits } => crate::sensor::quant::validate_bits(bits),
            CorruptionSpec::ExposureShift { gain } if !(gain > 0.0) || !gain.is_finite() => {
                Err(Error::invalid("gain", "must be > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CorruptionSpec::Blur { .. } => "blur",
            CorruptionSpec::Noise { .. } => "noise",
            CorruptionSpec::Bitdepth { .. } => "bitdepth",
            CorruptionSpec::ExposureShift { .. } => "exposure_shift",
        }
    }
}

fn channel(image: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    Tensor::new(&[h, w], image.data().iter().skip(k).step_by(c).copied().collect())
}

fn set_channel(image: &mut Tensor, k: usize, plane: &Tensor) {
    let c = image.len() / plane.len();
    for (i, v) in plane.data().iter().enumerate() {
        image[i * c + k] = *v;
    }
}

/// Applies one corruption. Neutral severities (0 waves, zero sigmas, gain 1)
/// return the input unchanged.
pub fn corrupt(image: &Tensor, spec: &CorruptionSpec, key: RngKey) -> Result<Tensor> {
    spec.validate()?;
    let (_, _, c) = image.hwc()?;
    match *spec {
        CorruptionSpec::Blur { waves } => {
            if waves == 0.0 {
                return Ok(image.clone());
            }
            let lens = LensParams::defocus(waves, 4);
            let stage = RenderStage::new(Some(lens.optics_model(PsfConfig::default())))?;
            let mut ps = ParamSet::new();
            lens.register(&mut ps, ZERNIKE_PARAM)?;
            let Some((grid, _)) = stage.psf_grid(&ps)? else {
                return Ok(image.clone());
            };
            if grid.channels != c {
                return Err(Error::shape("blur corruption", &[grid.channels], &[c]));
            }
            Ok(render_grid(image, &grid)?.0)
        }
        CorruptionSpec::Noise { sigma_s, sigma_r } => {
            let n = NoiseParams { sigma_s, sigma_r };
            let mut out = image.clone();
            let base = stage_id("corrupt.noise");
            for k in 0..c {
                let plane = add_noise(&channel(image, k)?, n, key.for_stage(base.wrapping_add(k as u32)))?;
                set_channel(&mut out, k, &plane);
            }
            if sigma_s != 0.0 || sigma_r != 0.0 {
                out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            Ok(out)
        }
        CorruptionSpec::Bitdepth { bits } => {
            let levels = (1u32 << bits) as f64;
            Ok(image.map(|v| (levels * v).floor().clamp(0.0, levels) / levels))
        }
        CorruptionSpec::ExposureShift { gain } => Ok(if gain == 1.0 {
            image.clone()
        } else {
            image.map(|v| (gain * v).clamp(0.0, 1.0))
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_complete() {
        let a = generate_scene(&SceneSpec::new(3, 64, 64)).unwrap();
        let b = generate_scene(&SceneSpec::new(3, 64, 64)).unwrap();
        assert_eq!(a, b);
        for seed in 0..100 {
            let s = generate_scene(&SceneSpec::new(seed, 64, 64)).unwrap();
            for cl in 0..SCENE_CLASSES as u8 {
                assert!(s.labels.data.contains(&cl), "seed {seed} lacks class {cl}");
            }
        }
    }

    #[test]
    fn illumination_bounds_image() {
        let mut spec = SceneSpec::new(9, 48, 40);
        spec.illumination = (0.2, 0.2);
        let s = generate_scene(&spec).unwrap();
        assert!(s.image.max() <= 0.2);
        assert!(s.image.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn too_small_rejected() {
        assert!(generate_scene(&SceneSpec::new(0, 31, 64)).is_err());
    }

    #[test]
    fn neutral_corruptions_are_identity() {
        let s = generate_scene(&SceneSpec::new(1, 32, 32)).unwrap();
        let key = RngKey::new(4);
        for spec in [
            CorruptionSpec::Blur { waves: 0.0 },
            CorruptionSpec::Noise {
                sigma_s: 0.0,
                sigma_r: 0.0,
            },
            CorruptionSpec::ExposureShift { gain: 1.0 },
        ] {
            assert_eq!(corrupt(&s.image, &spec, key).unwrap(), s.image);
        }
        let grid = s.image.map(|v| (v * 256.0).floor() / 256.0);
        assert_eq!(corrupt(&grid, &CorruptionSpec::Bitdepth { bits: 16 }, key).unwrap(), grid);
    }

    #[test]
    fn blur_spreads_edges() {
        let img = Tensor::from_fn(&[32, 32, 3], |i| if (i / 3) % 32 < 16 { 0.8 } else { 0.2 });
        let out = corrupt(&img, &CorruptionSpec::Blur { waves: 1.0 }, RngKey::new(0)).unwrap();
        assert!(out.max_abs_diff(&img) > 0.05);
        assert!(out.data().iter().all(|&v| (0.2 - 1e-9..=0.8 + 1e-9).contains(&v)));
    }

    #[test]
    fn invalid_severity() {
        let img = Tensor::full(&[32, 32, 3], 0.5);
        for spec in [
            CorruptionSpec::Noise {
                sigma_s: -1.0,
                sigma_r: 0.0,
            },
            CorruptionSpec::Bitdepth { bits: 0 },
            CorruptionSpec::ExposureShift { gain: 0.0 },
        ] {
            assert!(corrupt(&img, &spec, RngKey::new(0)).is_err());
        }
    }
}
