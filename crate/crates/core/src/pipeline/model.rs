use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::losses::{segmentation_loss, LossBreakdown, LossConfig};
use crate::metrics::{argmax, ConfusionMatrix, MetricsReport};
use crate::optics::lens::Lens;
use crate::optics::psf::PsfConfig;
use crate::optics::render::{NormalizeStage, RenderStage, ZERNIKE_PARAM};
use crate::params::{Grads, ParamSet};
use crate::rng::RngKey;
use crate::segnet::{build, SegNetConfig, SegNetStage};
use crate::sensor::exposure::GAMMA_PARAM;
use crate::sensor::{init_cfa, CfaModel, CfaStage, ExposureStage, NoiseParams, NoiseStage, QuantStage};
use crate::stage::{apply, Adjoint, Stage, Tape};
use crate::tensor::Tensor;

/// `gamma` giving unit exposure gain.
pub const DEFAULT_GAMMA_INIT: f64 = -1.3862943611198906;

/// Ablation switches. Turning off the optics also skips the mean-0.5
/// normalization; turning off the CFA replaces the mosaic by a channel mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Switches {
    pub optics_on: bool,
    pub exposure_on: bool,
    pub cfa_on: bool,
    pub cfa_learnable: bool,
    pub exposure_learnable: bool,
    pub noise_on: bool,
    pub quant_on: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            optics_on: true,
            exposure_on: true,
            cfa_on: true,
            cfa_learnable: true,
            exposure_learnable: true,
            noise_on: true,
            quant_on: true,
        }
    }
}

impl Switches {
    pub fn all_off() -> Self {
        Self {
            optics_on: false,
            exposure_on: false,
            cfa_on: false,
            cfa_learnable: false,
            exposure_learnable: false,
            noise_on: false,
            quant_on: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub exposure_gamma_init: f64,
    pub cfa_layout: String,
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub bits: u32,
    pub soft_cfa_selection: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        let n = NoiseParams::default();
        Self {
            exposure_gamma_init: DEFAULT_GAMMA_INIT,
            cfa_layout: "RCCC".into(),
            sigma_s: n.sigma_s,
            sigma_r: n.sigma_r,
            bits: 10,
            soft_cfa_selection: false,
        }
    }
}

impl SensorConfig {
    pub fn noise(&self) -> NoiseParams {
        NoiseParams {
            sigma_s: self.sigma_s,
            sigma_r: self.sigma_r,
        }
    }

    pub fn cfa_model(&self) -> Result<CfaModel> {
        let mut m = init_cfa(&self.cfa_layout)?;
        m.soft_selection = self.soft_cfa_selection;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.exposure_gamma_init.is_finite() {
            return Err(Error::invalid("exposure_gamma_init", "must be finite"));
        }
        self.cfa_model()?;
        self.noise().validate()?;
        crate::sensor::quant::validate_bits(self.bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub lens: Lens,
    pub psf: PsfConfig,
    pub sensor: SensorConfig,
    pub network: SegNetConfig,
    pub loss: LossConfig,
    pub switches: Switches,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lens: Lens::Identity,
            psf: PsfConfig::default(),
            sensor: SensorConfig::default(),
            network: SegNetConfig::default(),
            loss: LossConfig::default(),
            switches: Switches::default(),
        }
    }
}

/// Converts `[H, W, C]` radiance to `[H, W]` by averaging channels.
pub struct ChannelMeanStage;

struct MeanAdj {
    channels: usize,
    shape: Vec<usize>,
}

impl Adjoint for MeanAdj {
    fn backward(&self, ct: &Tensor, _: &mut Grads) -> Result<Tensor> {
        let c = self.channels;
        let s = 1.0 / c as f64;
        let mut g = Tensor::zeros(&self.shape);
        for (i, v) in ct.data().iter().enumerate() {
            for k in 0..c {
                g[i * c + k] = v * s;
            }
        }
        Ok(g)
    }
}

impl Stage for ChannelMeanStage {
    fn name(&self) -> &str {
        "channel_mean"
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        _: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let (h, w, c) = input.hwc()?;
        let data = input
            .data()
            .chunks_exact(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect();
        Ok((
            Tensor::new(&[h, w], data)?,
            Box::new(MeanAdj {
                channels: c,
                shape: input.shape().to_vec(),
            }),
        ))
    }
}

/// Result of a forward pass with every intermediate kept.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probs: Tensor,
    /// `(stage name, output)` in application order.
    pub intermediates: Vec<(String, Tensor)>,
    /// Radiance entering the mosaic (or channel mean); the smoothness guide.
    pub guide: Tensor,
}

/// Loss terms and parameter gradients of one sample.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub loss: LossBreakdown,
    pub grads: Grads,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    render: RenderStage,
    normalize: NormalizeStage,
    exposure: ExposureStage,
    cfa: CfaStage,
    mean: ChannelMeanStage,
    noise: NoiseStage,
    quant: QuantStage,
    net: SegNetStage,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.sensor.validate()?;
        cfg.loss.validate()?;
        cfg.network.validate()?;
        let model = match &cfg.lens {
            Lens::Identity => None,
            Lens::Zernike(l) => {
                l.validate()?;
                Some(l.optics_model(cfg.psf))
            }
        };
        let cfa = CfaStage::new(&cfg.sensor.cfa_model()?);
        Ok(Self {
            render: RenderStage::new(model)?,
            normalize: NormalizeStage,
            exposure: ExposureStage::default(),
            cfa,
            mean: ChannelMeanStage,
            noise: NoiseStage,
            quant: QuantStage { bits: cfg.sensor.bits },
            net: SegNetStage::new(cfg.network)?,
            cfg,
        })
    }

    /// Fresh parameters for every enabled stage; network weights from `key`.
    pub fn init_params(&self, key: RngKey) -> Result<ParamSet> {
        let sw = self.cfg.switches;
        let mut ps = ParamSet::new();
        if sw.optics_on {
            if let Lens::Zernike(l) = &self.cfg.lens {
                l.register(&mut ps, ZERNIKE_PARAM)?;
            }
        }
        if sw.exposure_on {
            ps.insert(
                GAMMA_PARAM,
                crate::params::Group::Sensor,
                sw.exposure_learnable,
                Tensor::scalar(self.cfg.sensor.exposure_gamma_init),
            )?;
        }
        if sw.cfa_on {
            self.cfg.sensor.cfa_model()?.register(&mut ps, sw.cfa_learnable)?;
        }
        if sw.noise_on {
            self.cfg.sensor.noise().register(&mut ps, false)?;
        }
        ps.extend(build(&self.cfg.network, key)?)?;
        Ok(ps)
    }

    pub fn tau(&self) -> f64 {
        self.cfa.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::invalid("tau_pi", "must be > 0"));
        }
        self.cfa.tau = tau;
        Ok(())
    }

    pub fn bits(&self) -> u32 {
        self.quant.bits
    }

    pub fn set_bits(&mut self, bits: u32) -> Result<()> {
        crate::sensor::quant::validate_bits(bits)?;
        self.quant.bits = bits;
        Ok(())
    }

    /// Enabled stages in application order.
    pub fn stages(&self, noise: bool) -> Vec<&dyn Stage> {
        let sw = self.cfg.switches;
        let mut v: Vec<&dyn Stage> = Vec::new();
        if sw.optics_on {
            v.push(&self.render);
            v.push(&self.normalize);
        }
        if sw.exposure_on {
            v.push(&self.exposure);
        }
        if sw.cfa_on {
            v.push(&self.cfa);
        } else {
            v.push(&self.mean);
        }
        if sw.noise_on && noise {
            v.push(&self.noise);
        }
        if sw.quant_on {
            v.push(&self.quant);
        }
        v.push(&self.net);
        v
    }

    fn run<'a>(
        &'a self,
        x: &Tensor,
        params: &'a ParamSet,
        key: Option<RngKey>,
        noise: bool,
    ) -> Result<(Tape<'a>, Forward)> {
        let (_, _, c) = x.hwc()?;
        if c != 3 {
            return Err(Error::shape("radiance", &[x.shape()[0], x.shape()[1], 3], x.shape()));
        }
        let mut tape = Tape::new();
        let mut cur = x.clone();
        let mut prev = "input";
        let mut guide = None;
        let mut intermediates = Vec::new();
        for st in self.stages(noise) {
            if st.name() == "mosaic" || st.name() == "channel_mean" {
                guide = Some(cur.clone());
            }
            cur = apply(&mut tape, prev, st, &cur, params, key).map_err(|e| annotate(e, st.name()))?;
            prev = st.name();
            intermediates.push((st.name().to_string(), cur.clone()));
        }
        let guide = guide.unwrap_or_else(|| x.clone());
        Ok((
            tape,
            Forward {
                probs: cur,
                intermediates,
                guide,
            },
        ))
    }

    /// Forward pass. With `noise == false` the noise stage is skipped even
    /// when enabled; otherwise `key` must be given.
    pub fn forward(&self, x: &Tensor, params: &ParamSet, key: Option<RngKey>, noise: bool) -> Result<Forward> {
        Ok(self.run(x, params, key, noise)?.1)
    }

    /// Loss and gradients of one training sample.
    pub fn loss_and_grads(&self, sample: &Sample, params: &ParamSet, key: RngKey, progress: f64) -> Result<StepLoss> {
        let (tape, fwd) = self.run(&sample.image, params, Some(key), true)?;
        let loss = segmentation_loss(&fwd.probs, &sample.labels, &fwd.guide, &self.cfg.loss, progress)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads = Grads::new();
        tape.backward(loss.grad.clone(), &mut grads)?;
        grads.mask_frozen(params);
        Ok(StepLoss { loss, grads })
    }

    /// Predicted label map of one image.
    pub fn predict(&self, x: &Tensor, params: &ParamSet, noise_key: Option<RngKey>) -> Result<LabelMap> {
        let f = self.forward(x, params, noise_key, noise_key.is_some())?;
        argmax(&f.probs)
    }

    /// Confusion-matrix metrics over `data`. Noise runs only when
    /// `noise_seed` is given, keyed per sample.
    pub fn evaluate(&self, params: &ParamSet, data: &[Sample], noise_seed: Option<u64>) -> Result<MetricsReport> {
        let classes = self.cfg.network.num_classes;
        let mut cm = ConfusionMatrix::new(classes);
        for (i, s) in data.iter().enumerate() {
            s.labels.validate(classes)?;
            let key = noise_seed.map(|seed| RngKey::new(seed).at_step(i as u64));
            let pred = self.predict(&s.image, params, key)?;
            cm.accumulate(&pred, &s.labels)?;
        }
        MetricsReport::from_confusion(cm)
    }
}

fn annotate(e: Error, stage: &str) -> Error {
    match e {
        Error::Invalid { key, reason } => Error::Invalid {
            key: alloc::format!("{stage}: {key}"),
            reason,
        },
        e => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::lens::LensParams;
    use crate::params::Group;
    use crate::sensor::exposure::gamma_for_gain;

    fn small_net() -> SegNetConfig {
        SegNetConfig {
            base_width: 4,
            depth: 2,
            num_classes: 5,
            ..SegNetConfig::default()
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut r = RngKey::new(seed).rng();
        Tensor::from_fn(&[16, 16, 3], |_| 0.05 + 0.9 * r.uniform())
    }

    #[test]
    fn default_gamma_is_unit_gain() {
        assert!((gamma_for_gain(1.0) - DEFAULT_GAMMA_INIT).abs() < 1e-15);
        assert!((crate::sensor::exposure_gain(DEFAULT_GAMMA_INIT) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_off_is_net_on_channel_mean() {
        let cfg = PipelineConfig {
            switches: Switches::all_off(),
            network: small_net(),
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        let ps = p.init_params(RngKey::new(1)).unwrap();
        let x = Tensor::full(&[16, 16, 3], 0.4);
        let f = p.forward(&x, &ps, None, true).unwrap();
        assert_eq!(f.probs.shape(), &[16, 16, 5]);
        let mean = Tensor::full(&[16, 16], (0.4 + 0.4 + 0.4) / 3.0);
        let direct = crate::segnet::SegNet::new(small_net()).unwrap().forward(&ps, &mean).unwrap().0;
        assert_eq!(f.probs, direct);
    }

    #[test]
    fn composed_oracle_selects_channel() {
        let mut sensor = SensorConfig {
            cfa_layout: "BAYER_RGGB".into(),
            sigma_s: 0.0,
            sigma_r: 0.0,
            bits: 16,
            ..SensorConfig::default()
        };
        sensor.exposure_gamma_init = DEFAULT_GAMMA_INIT;
        let p = Pipeline::new(PipelineConfig {
            sensor,
            network: small_net(),
            ..PipelineConfig::default()
        })
        .unwrap();
        let ps = p.init_params(RngKey::new(0)).unwrap();
        let mut x = image(3).map(|v| 0.5 * v);
        x[0] = 1.0;
        let f = p.forward(&x, &ps, Some(RngKey::new(5)), true).unwrap();
        let q = &f.intermediates.iter().find(|(n, _)| n == "quantize").unwrap().1;
        let norm = x.map(|v| v * 0.5 / x.mean());
        let cells = [0, 1, 1, 2];
        for y in 0..16 {
            for xx in 0..16 {
                let ch = cells[(y % 2) * 2 + xx % 2];
                let want = norm[(y * 16 + xx) * 3 + ch].clamp(0.0, 1.0);
                assert!((q[y * 16 + xx] - want).abs() <= 1.0 / 65536.0);
            }
        }
    }

    #[test]
    fn optics_off_ignores_lens() {
        let mut lens = LensParams::defocus(0.5, 6);
        lens.trainable = true;
        let mut cfg = PipelineConfig {
            lens: Lens::Zernike(lens),
            network: small_net(),
            ..PipelineConfig::default()
        };
        cfg.switches.optics_on = false;
        let p = Pipeline::new(cfg).unwrap();
        let ps = p.init_params(RngKey::new(0)).unwrap();
        assert_eq!(ps.count(Some(Group::Optics)), 0);
        let a = p.forward(&image(1), &ps, Some(RngKey::new(2)), true).unwrap().probs;
        let b = p.forward(&image(1), &ps, Some(RngKey::new(2)), true).unwrap().probs;
        assert_eq!(a, b);
    }

    #[test]
    fn noise_requires_key() {
        let p = Pipeline::new(PipelineConfig {
            network: small_net(),
            ..PipelineConfig::default()
        })
        .unwrap();
        let ps = p.init_params(RngKey::new(0)).unwrap();
        assert!(matches!(
            p.forward(&image(1), &ps, None, true),
            Err(Error::NeedsKey { .. })
        ));
        assert!(p.forward(&image(1), &ps, None, false).is_ok());
    }
}
