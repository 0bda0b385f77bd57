//! Finite-difference checks of every differentiable stage on 8x8 inputs.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::model::ChannelMeanStage;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::losses::{LossKind, LossStage, OhemConfig, SmoothnessConfig};
use crate::optics::lens::LensParams;
use crate::optics::psf::PsfConfig;
use crate::optics::render::{NormalizeStage, RenderStage, ZERNIKE_PARAM};
use crate::params::{Group, ParamSet};
use crate::rng::RngKey;
use crate::segnet::{build, DsBlockStage, SeBlockStage, SegNetConfig, SegNetStage};
use crate::sensor::exposure::GAMMA_PARAM;
use crate::sensor::{init_cfa, CfaStage, ExposureStage, NoiseParams, NoiseStage, QuantStage};
use crate::stage::Stage;
use crate::tensor::Tensor;

/// Case labels, one per checked stage configuration.
pub const CASES: [&str; 14] = [
    "render",
    "normalize_render",
    "exposure",
    "mosaic",
    "mosaic.soft",
    "channel_mean",
    "noise",
    "quantize",
    "segnet",
    "segnet.ds_block",
    "segnet.se_block",
    "loss.ohem",
    "loss.lovasz",
    "loss.smoothness",
];

/// Side of the square test inputs.
pub const SIZE: usize = 8;

pub struct Case {
    pub label: &'static str,
    pub stage: Box<dyn Stage>,
    pub input: Tensor,
    pub params: ParamSet,
    pub key: Option<RngKey>,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, key: RngKey) -> Tensor {
    let mut r = key.rng();
    Tensor::from_fn(shape, |_| r.range(lo, hi))
}

fn probs(c: usize, key: RngKey) -> Tensor {
    let mut t = uniform(&[SIZE, SIZE, c], 0.05, 1.0, key);
    for px in t.data_mut().chunks_mut(c) {
        let s: f64 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn labels(c: usize, key: RngKey) -> LabelMap {
    let mut r = key.rng();
    let data = (0..SIZE * SIZE)
        .map(|_| if r.uniform() < 0.05 { 255 } else { r.int(0, c - 1) as u8 })
        .collect();
    LabelMap::new(SIZE, SIZE, data).unwrap()
}

/// Builds the fixture for `label` under `seed`.
pub fn case(label: &str, seed: u64) -> Result<Case> {
    let key = RngKey::new(seed).with_stream(11);
    let k = |i: u64| RngKey::new(seed).at_step(i);
    let rgb = [SIZE, SIZE, 3];
    let mut params = ParamSet::new();
    let (stage, input, key): (Box<dyn Stage>, Tensor, Option<RngKey>) = match label {
        "render" => {
            let mut r = k(1).rng();
            let mut lens = LensParams::defocus(0.0, 6);
            lens.coeffs[0] = (0..6).map(|_| r.range(-0.3, 0.3)).collect();
            lens.register(&mut params, ZERNIKE_PARAM)?;
            let psf = PsfConfig {
                pupil_samples: 32,
                kernel_size: 7,
            };
            let st = RenderStage::new(Some(lens.optics_model(psf)))?;
            (Box::new(st), uniform(&rgb, 0.0, 1.0, k(2)), None)
        }
        "normalize_render" => (Box::new(NormalizeStage), uniform(&rgb, 0.1, 1.0, k(2)), None),
        "exposure" => {
            params.insert(GAMMA_PARAM, Group::Sensor, true, Tensor::scalar(0.3))?;
            // keeps alpha * x inside (0, 1)
            (Box::new(ExposureStage::default()), uniform(&rgb, 0.02, 0.4, k(2)), None)
        }
        "mosaic" | "mosaic.soft" => {
            let mut m = init_cfa("BAYER_RGGB")?;
            m.soft_selection = label == "mosaic.soft";
            m.responses = uniform(&[3, 3], -2.0, 2.0, k(1));
            m.selection = uniform(&[4, 3], -1.0, 1.0, k(3));
            m.tau = 0.7;
            m.register(&mut params, true)?;
            (Box::new(CfaStage::new(&m)), uniform(&rgb, 0.0, 1.0, k(2)), None)
        }
        "channel_mean" => (Box::new(ChannelMeanStage), uniform(&rgb, 0.0, 1.0, k(2)), None),
        "noise" => {
            NoiseParams::default().register(&mut params, true)?;
            (Box::new(NoiseStage), uniform(&[SIZE, SIZE], 0.1, 0.9, k(2)), Some(key))
        }
        "quantize" => (Box::new(QuantStage { bits: 8 }), uniform(&[SIZE, SIZE], 0.0, 1.0, k(2)), None),
        "segnet" => {
            let cfg = SegNetConfig {
                base_width: 4,
                depth: 1,
                num_classes: 3,
                ..SegNetConfig::default()
            };
            params = build(&cfg, k(1))?;
            // nonzero biases so every bias gradient is exercised
            let mut r = k(3).rng();
            for p in params.iter_mut() {
                if p.name.ends_with(".b") || p.name.ends_with(".b1") || p.name.ends_with(".b2") {
                    p.value.data_mut().iter_mut().for_each(|v| *v = r.range(-0.3, 0.3));
                }
            }
            (Box::new(SegNetStage::new(cfg)?), uniform(&[SIZE, SIZE], 0.0, 1.0, k(2)), None)
        }
        "segnet.ds_block" => {
            let st = DsBlockStage {
                prefix: "ds".into(),
                c_in: 4,
                c_out: 4,
                group_norm: false,
            };
            st.init(&mut params, k(1))?;
            (Box::new(st), uniform(&[4, SIZE, SIZE], -1.0, 1.0, k(2)), None)
        }
        "segnet.se_block" => {
            let st = SeBlockStage {
                prefix: "se".into(),
                channels: 8,
                hidden: 2,
            };
            st.init(&mut params, k(1))?;
            (Box::new(st), uniform(&[8, SIZE, SIZE], -1.0, 1.0, k(2)), None)
        }
        "loss.ohem" => {
            let kind = LossKind::Ohem {
                labels: labels(4, k(1)),
                cfg: OhemConfig {
                    hard_fraction: 0.25,
                    min_kept: 4,
                },
            };
            (Box::new(LossStage { kind }), probs(4, k(2)), None)
        }
        "loss.lovasz" => {
            let kind = LossKind::Lovasz { labels: labels(4, k(1)) };
            (Box::new(LossStage { kind }), probs(4, k(2)), None)
        }
        "loss.smoothness" => {
            let kind = LossKind::Smoothness {
                guide: uniform(&rgb, 0.0, 1.0, k(1)),
                cfg: SmoothnessConfig::default(),
            };
            (Box::new(LossStage { kind }), probs(4, k(2)), None)
        }
        other => return Err(Error::invalid("stage", alloc::format!("no gradient check registered for `{other}`"))),
    };
    Ok(Case {
        label: CASES.iter().find(|c| **c == label).copied().unwrap_or("unknown"),
        stage,
        input,
        params,
        key,
    })
}

/// One checked case.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub label: String,
    pub seed: u64,
    pub report: GradcheckReport,
}

/// Runs the checks for `labels` (all when empty) over `seeds`.
pub fn run_suite(labels: &[&str], seeds: core::ops::Range<u64>) -> Result<Vec<SuiteResult>> {
    let chosen: Vec<&str> = if labels.is_empty() { CASES.to_vec() } else { labels.to_vec() };
    let mut out = Vec::new();
    for label in chosen {
        for seed in seeds.clone() {
            let c = case(label, seed)?;
            let opts = GradcheckOptions {
                projection_seed: seed,
                ..GradcheckOptions::default()
            };
            let report = gradcheck(c.stage.as_ref(), &c.input, &c.params, c.key, opts)?;
            out.push(SuiteResult {
                label: label.to_string(),
                seed,
                report,
            });
        }
    }
    Ok(out)
}
