//! Compact UNet: stem conv, `depth` encoder stages of two depthwise-separable
//! convs plus a squeeze-and-excitation gate and 2x average pooling, and a
//! mirrored decoder (bilinear 2x upsampling, skip concatenation, two
//! depthwise-separable convs), followed by a 1x1 head and a channel softmax.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::error::{Error, Result};
use crate::optics::render::reflect;
use crate::params::{Grads, Group, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub se_reduction: usize,
    pub param_budget: usize,
    /// Group normalization after every pointwise conv.
    pub group_norm: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            depth: 4,
            num_classes: 19,
            se_reduction: 4,
            param_budget: 500_000,
            group_norm: false,
        }
    }
}

pub const GN_GROUPS: usize = 4;
const GN_EPS: f64 = 1e-5;

impl SegNetConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn se_hidden(&self, c: usize) -> usize {
        (c / self.se_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "must be >= 2"));
        }
        if self.base_width == 0 || self.depth == 0 || self.se_reduction == 0 {
            return Err(Error::invalid("network", "base_width, depth and se_reduction must be positive"));
        }
        if self.depth > 8 {
            return Err(Error::invalid("depth", "must be <= 8"));
        }
        Ok(())
    }

    /// Every parameter `(name, shape, fan_in)` in build order. Fan-in 0 marks a bias.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut v = Vec::new();
        let w0 = self.width(0);
        v.push(("net.stem.w".into(), vec![w0, 1, 3, 3], 9));
        v.push(("net.stem.b".into(), vec![w0], 0));
        let ds = |v: &mut Vec<(String, Vec<usize>, usize)>, p: &str, cin: usize, cout: usize| {
            v.push((format!("{p}.dw.w"), vec![cin, 3, 3], 9));
            v.push((format!("{p}.dw.b"), vec![cin], 0));
            v.push((format!("{p}.pw.w"), vec![cout, cin], cin));
            v.push((format!("{p}.pw.b"), vec![cout], 0));
            if self.group_norm {
                v.push((format!("{p}.gn.g"), vec![cout], usize::MAX));
                v.push((format!("{p}.gn.b"), vec![cout], 0));
            }
        };
        for i in 0..self.depth {
            let (cin, cout) = (self.width(i), self.width(i + 1));
            ds(&mut v, &format!("net.enc{i}.ds0"), cin, cout);
            ds(&mut v, &format!("net.enc{i}.ds1"), cout, cout);
            let r = self.se_hidden(cout);
            v.push((format!("net.enc{i}.se.w1"), vec![r, cout], cout));
            v.push((format!("net.enc{i}.se.b1"), vec![r], 0));
            v.push((format!("net.enc{i}.se.w2"), vec![cout, r], r));
            v.push((format!("net.enc{i}.se.b2"), vec![cout], 0));
        }
        for i in (0..self.depth).rev() {
            let (cin, cout) = (2 * self.width(i + 1), self.width(i));
            ds(&mut v, &format!("net.dec{i}.ds0"), cin, cout);
            ds(&mut v, &format!("net.dec{i}.ds1"), cout, cout);
        }
        v.push(("net.head.w".into(), vec![self.num_classes, w0], w0));
        v.push(("net.head.b".into(), vec![self.num_classes], 0));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// He-initialized weights, zero biases, unit GN scales.
pub fn build(cfg: &SegNetConfig, key: RngKey) -> Result<ParamSet> {
    cfg.validate()?;
    let count = cfg.param_count();
    if count > cfg.param_budget {
        return Err(Error::invalid(
            "param_budget",
            format!("network has {count} parameters, budget is {}", cfg.param_budget),
        ));
    }
    if cfg.group_norm {
        for i in 0..=cfg.depth {
            if cfg.width(i) % GN_GROUPS != 0 {
                return Err(Error::invalid("base_width", "must be divisible by 4 with group_norm"));
            }
        }
    }
    let mut rng = key.rng();
    let mut ps = ParamSet::new();
    for (name, shape, fan_in) in cfg.layout() {
        let t = match fan_in {
            0 => Tensor::zeros(&shape),
            usize::MAX => Tensor::full(&shape, 1.0),
            f => {
                let std = (2.0 / f as f64).sqrt();
                Tensor::from_fn(&shape, |_| std * rng.normal())
            }
        };
        ps.insert(&name, Group::Network, true, t)?;
    }
    Ok(ps)
}

fn add_grad(grads: &mut Grads, params: &ParamSet, name: &str, data: Vec<f64>) -> Result<()> {
    let shape = params.get(name)?.shape().to_vec();
    grads.accumulate(name, &Tensor::new(&shape, data)?);
    Ok(())
}

struct GnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn gn_forward(x: &[f64], c: usize, hw: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, GnCache) {
    let cg = c / GN_GROUPS;
    let n = (cg * hw) as f64;
    let mut xhat = vec![0.0; c * hw];
    let mut inv_std = vec![0.0; GN_GROUPS];
    let mut y = vec![0.0; c * hw];
    for g in 0..GN_GROUPS {
        let sl = &x[g * cg * hw..(g + 1) * cg * hw];
        let mean = sl.iter().sum::<f64>() / n;
        let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + GN_EPS).sqrt();
        inv_std[g] = is;
        for (i, v) in sl.iter().enumerate() {
            let idx = g * cg * hw + i;
            let ch = idx / hw;
            xhat[idx] = (v - mean) * is;
            y[idx] = gamma[ch] * xhat[idx] + beta[ch];
        }
    }
    (y, GnCache { xhat, inv_std })
}

fn gn_backward(cache: &GnCache, c: usize, hw: usize, gamma: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / GN_GROUPS;
    let n = (cg * hw) as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        for s in 0..hw {
            let i = ch * hw + s;
            ggamma[ch] += gy[i] * cache.xhat[i];
            gbeta[ch] += gy[i];
        }
    }
    let mut gx = vec![0.0; c * hw];
    for g in 0..GN_GROUPS {
        let range = g * cg * hw..(g + 1) * cg * hw;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in range.clone() {
            let gxh = gy[i] * gamma[i / hw];
            s1 += gxh;
            s2 += gxh * cache.xhat[i];
        }
        for i in range {
            let gxh = gy[i] * gamma[i / hw];
            gx[i] = cache.inv_std[g] * (gxh - s1 / n - cache.xhat[i] * s2 / n);
        }
    }
    (gx, ggamma, gbeta)
}

/// Cache of one depthwise-separable block.
pub(crate) struct DsCache {
    prefix: String,
    x: Vec<f64>,
    z: Vec<f64>,
    gn: Option<GnCache>,
    y: Vec<f64>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

pub(crate) fn ds_forward(params: &ParamSet, prefix: &str, x: Vec<f64>, cin: usize, cout: usize, h: usize, w: usize, gn: bool) -> Result<(Vec<f64>, DsCache)> {
    let dw_w = params.get(&format!("{prefix}.dw.w"))?.data();
    let dw_b = params.get(&format!("{prefix}.dw.b"))?.data();
    let pw_w = params.get(&format!("{prefix}.pw.w"))?.data();
    let pw_b = params.get(&format!("{prefix}.pw.b"))?.data();
    let z = depthwise_forward(&x, cin, h, w, dw_w, dw_b);
    let mut y = pointwise_forward(&z, cin, h * w, pw_w, pw_b, cout);
    let gn_cache = if gn {
        let g = params.get(&format!("{prefix}.gn.g"))?.data();
        let b = params.get(&format!("{prefix}.gn.b"))?.data();
        let (out, c) = gn_forward(&y, cout, h * w, g, b);
        y = out;
        Some(c)
    } else {
        None
    };
    relu_inplace(&mut y);
    Ok((
        y.clone(),
        DsCache {
            prefix: prefix.into(),
            x,
            z,
            gn: gn_cache,
            y,
            cin,
            cout,
            h,
            w,
        },
    ))
}

pub(crate) fn ds_backward(params: &ParamSet, c: &DsCache, mut gy: Vec<f64>, grads: &mut Grads) -> Result<Vec<f64>> {
    let p = &c.prefix;
    let hw = c.h * c.w;
    relu_backward_inplace(&c.y, &mut gy);
    if let Some(gc) = &c.gn {
        let gname = format!("{p}.gn.g");
        let gamma = params.get(&gname)?.data();
        let (gx, gg, gb) = gn_backward(gc, c.cout, hw, gamma, &gy);
        add_grad(grads, params, &gname, gg)?;
        add_grad(grads, params, &format!("{p}.gn.b"), gb)?;
        gy = gx;
    }
    let pw_name = format!("{p}.pw.w");
    let pw_w = params.get(&pw_name)?.data();
    let (gz, gw, gb) = pointwise_backward(&c.z, c.cin, hw, pw_w, c.cout, &gy);
    add_grad(grads, params, &pw_name, gw)?;
    add_grad(grads, params, &format!("{p}.pw.b"), gb)?;
    let dw_name = format!("{p}.dw.w");
    let dw_w = params.get(&dw_name)?.data();
    let (gx, gw, gb) = depthwise_backward(&c.x, c.cin, c.h, c.w, dw_w, &gz);
    add_grad(grads, params, &dw_name, gw)?;
    add_grad(grads, params, &format!("{p}.dw.b"), gb)?;
    Ok(gx)
}

struct EncCache {
    ds0: DsCache,
    ds1: DsCache,
    se_x: Vec<f64>,
    se: SeCache,
}

struct DecCache {
    ds0: DsCache,
    ds1: DsCache,
    /// Channels of the upsampled path in the concatenation.
    up_channels: usize,
}

/// Everything the backward pass needs from one forward.
pub struct NetCache {
    in_hw: (usize, usize),
    hw: (usize, usize),
    stem_col: Vec<f64>,
    stem_y: Vec<f64>,
    enc: Vec<EncCache>,
    dec: Vec<DecCache>,
    head_x: Vec<f64>,
    probs: Vec<f64>,
}

fn check_finite(v: &[f64], layer: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("segnet layer {layer}")))
    }
}

/// Reflect-pads `[h, w]` up to `[ph, pw]` (extra rows/cols at the bottom/right).
fn pad_reflect(x: &[f64], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize, h);
        for xx in 0..pw {
            out[y * pw + xx] = x[sy * w + reflect(xx as isize, w)];
        }
    }
    out
}

fn unpad_reflect_adjoint(g: &[f64], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..ph {
        let sy = reflect(y as isize, h);
        for xx in 0..pw {
            out[sy * w + reflect(xx as isize, w)] += g[y * pw + xx];
        }
    }
    out
}

pub struct SegNet {
    pub cfg: SegNetConfig,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Forward on a `[H, W]` raw frame; returns `[H, W, C]` probabilities.
    pub fn forward(&self, params: &ParamSet, raw: &Tensor) -> Result<(Tensor, NetCache)> {
        let cfg = &self.cfg;
        let (h0, w0_, c) = raw.hwc()?;
        if c != 1 {
            return Err(Error::shape("segnet input", &[h0, w0_, 1], raw.shape()));
        }
        let m = 1usize << cfg.depth;
        let (h, w) = (h0.div_ceil(m) * m, w0_.div_ceil(m) * m);
        let x0 = if (h, w) == (h0, w0_) {
            raw.data().to_vec()
        } else {
            pad_reflect(raw.data(), h0, w0_, h, w)
        };

        let w0 = cfg.width(0);
        let (mut y, stem_col) = conv3_forward(
            &x0,
            1,
            h,
            w,
            params.get("net.stem.w")?.data(),
            params.get("net.stem.b")?.data(),
            w0,
        );
        relu_inplace(&mut y);
        check_finite(&y, "stem")?;
        let stem_y = y.clone();

        let mut enc = Vec::with_capacity(cfg.depth);
        let mut skips = Vec::with_capacity(cfg.depth);
        let (mut ch, mut cw) = (h, w);
        let mut cur = y;
        for i in 0..cfg.depth {
            let (cin, cout) = (cfg.width(i), cfg.width(i + 1));
            let (a, ds0) = ds_forward(params, &format!("net.enc{i}.ds0"), cur, cin, cout, ch, cw, cfg.group_norm)?;
            let (b, ds1) = ds_forward(params, &format!("net.enc{i}.ds1"), a, cout, cout, ch, cw, cfg.group_norm)?;
            let p = format!("net.enc{i}.se");
            let (s, se) = se_forward(
                &b,
                cout,
                ch * cw,
                params.get(&format!("{p}.w1"))?.data(),
                params.get(&format!("{p}.b1"))?.data(),
                params.get(&format!("{p}.w2"))?.data(),
                params.get(&format!("{p}.b2"))?.data(),
            );
            check_finite(&s, &format!("enc{i}"))?;
            cur = avgpool2_forward(&s, cout, ch, cw);
            skips.push(s);
            enc.push(EncCache { ds0, ds1, se_x: b, se });
            ch /= 2;
            cw /= 2;
        }

        let mut dec = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let cskip = cfg.width(i + 1);
            let up = upsample2_forward(&cur, cskip, ch, cw);
            ch *= 2;
            cw *= 2;
            let mut cat = up;
            cat.extend_from_slice(&skips[i]);
            let (a, ds0) = ds_forward(params, &format!("net.dec{i}.ds0"), cat, 2 * cskip, cfg.width(i), ch, cw, cfg.group_norm)?;
            let (b, ds1) = ds_forward(params, &format!("net.dec{i}.ds1"), a, cfg.width(i), cfg.width(i), ch, cw, cfg.group_norm)?;
            check_finite(&b, &format!("dec{i}"))?;
            cur = b;
            dec.push(DecCache {
                ds0,
                ds1,
                up_channels: cskip,
            });
        }

        let k = cfg.num_classes;
        let logits = pointwise_forward(
            &cur,
            w0,
            h * w,
            params.get("net.head.w")?.data(),
            params.get("net.head.b")?.data(),
            k,
        );
        let probs = softmax_channels(&logits, k, h * w);
        check_finite(&probs, "head")?;

        let mut out = Tensor::zeros(&[h0, w0_, k]);
        {
            let od = out.data_mut();
            for y in 0..h0 {
                for x in 0..w0_ {
                    for cl in 0..k {
                        od[(y * w0_ + x) * k + cl] = probs[cl * h * w + y * w + x];
                    }
                }
            }
        }
        Ok((
            out,
            NetCache {
                in_hw: (h0, w0_),
                hw: (h, w),
                stem_col,
                stem_y,
                enc,
                dec,
                head_x: cur,
                probs,
            },
        ))
    }

    /// Pulls a `[H, W, C]` probability cotangent back to the input frame and
    /// the network parameters.
    pub fn backward(&self, params: &ParamSet, cache: &NetCache, g_probs: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (h0, w0_) = cache.in_hw;
        let (h, w) = cache.hw;
        let k = cfg.num_classes;
        g_probs.expect_shape("segnet cotangent", &[h0, w0_, k])?;
        let mut gp = vec![0.0; k * h * w];
        for y in 0..h0 {
            for x in 0..w0_ {
                for cl in 0..k {
                    gp[cl * h * w + y * w + x] = g_probs.data()[(y * w0_ + x) * k + cl];
                }
            }
        }
        let glogit = softmax_channels_backward(&cache.probs, k, h * w, &gp);
        let w0 = cfg.width(0);
        let (mut g, gw, gb) =
            pointwise_backward(&cache.head_x, w0, h * w, params.get("net.head.w")?.data(), k, &glogit);
        add_grad(grads, params, "net.head.w", gw)?;
        add_grad(grads, params, "net.head.b", gb)?;

        let mut gskips: Vec<Vec<f64>> = vec![Vec::new(); cfg.depth];
        let (mut ch, mut cw) = (h, w);
        for (i, dc) in cache.dec.iter().rev().enumerate() {
            g = ds_backward(params, &dc.ds1, g, grads)?;
            let gcat = ds_backward(params, &dc.ds0, g, grads)?;
            let split = dc.up_channels * ch * cw;
            gskips[i] = gcat[split..].to_vec();
            ch /= 2;
            cw /= 2;
            g = upsample2_backward(&gcat[..split], dc.up_channels, ch, cw);
        }

        for i in (0..cfg.depth).rev() {
            let ec = &cache.enc[i];
            let cout = cfg.width(i + 1);
            ch *= 2;
            cw *= 2;
            let mut gs = avgpool2_backward(&g, cout, ch, cw);
            for (a, b) in gs.iter_mut().zip(&gskips[i]) {
                *a += b;
            }
            let p = format!("net.enc{i}.se");
            let (gx, gw1, gb1, gw2, gb2) = se_backward(
                &ec.se_x,
                cout,
                ch * cw,
                params.get(&format!("{p}.w1"))?.data(),
                params.get(&format!("{p}.w2"))?.data(),
                &ec.se,
                &gs,
            );
            add_grad(grads, params, &format!("{p}.w1"), gw1)?;
            add_grad(grads, params, &format!("{p}.b1"), gb1)?;
            add_grad(grads, params, &format!("{p}.w2"), gw2)?;
            add_grad(grads, params, &format!("{p}.b2"), gb2)?;
            let ga = ds_backward(params, &ec.ds1, gx, grads)?;
            g = ds_backward(params, &ec.ds0, ga, grads)?;
        }

        relu_backward_inplace(&cache.stem_y, &mut g);
        let (gx, gw, gb) = conv3_backward(&cache.stem_col, 1, h, w, params.get("net.stem.w")?.data(), w0, &g);
        add_grad(grads, params, "net.stem.w", gw)?;
        add_grad(grads, params, "net.stem.b", gb)?;

        let gin = if (h, w) == (h0, w0_) {
            gx
        } else {
            unpad_reflect_adjoint(&gx, h0, w0_, h, w)
        };
        Tensor::new(&[h0, w0_], gin)
    }
}

/// Network as a pipeline stage: `[H, W]` raw in, `[H, W, C]` probabilities out.
pub struct SegNetStage {
    pub net: SegNet,
    names: Vec<String>,
}

impl SegNetStage {
    pub fn new(cfg: SegNetConfig) -> Result<Self> {
        let names = cfg.layout().into_iter().map(|(n, _, _)| n).collect();
        Ok(Self {
            net: SegNet::new(cfg)?,
            names,
        })
    }
}

struct SegNetAdj<'a> {
    stage: &'a SegNetStage,
    params: &'a ParamSet,
    cache: NetCache,
}

impl Adjoint for SegNetAdj<'_> {
    fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        self.stage.net.backward(self.params, &self.cache, ct, grads)
    }
}

impl Stage for SegNetStage {
    fn name(&self) -> &str {
        "segnet"
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let (out, cache) = self.net.forward(params, input)?;
        Ok((
            out,
            Box::new(SegNetAdj {
                stage: self,
                params,
                cache,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SegNetConfig {
        SegNetConfig {
            base_width: 4,
            depth: 1,
            num_classes: 2,
            se_reduction: 4,
            param_budget: 500_000,
            group_norm: false,
        }
    }

    #[test]
    fn default_fits_budget() {
        let n = SegNetConfig::default().param_count();
        assert!(n <= 500_000, "{n}");
        let ps = build(&SegNetConfig::default(), RngKey::new(0)).unwrap();
        assert_eq!(ps.count(None), n);
    }

    #[test]
    fn tiny_count_by_hand() {
        // stem 9*4+4; enc ds0 (4->8) 36+4+32+8; ds1 (8->8) 72+8+64+8;
        // se (8, hidden 2) 16+2+16+8; dec ds0 (16->4) 144+16+64+4; ds1 (4->4) 36+4+16+4;
        // head 4*2+2
        let hand = 40 + 80 + 152 + 42 + 228 + 60 + 10;
        assert_eq!(tiny().param_count(), hand);
    }

    #[test]
    fn budget_violation_reports_count() {
        let cfg = SegNetConfig {
            param_budget: 100,
            ..tiny()
        };
        match build(&cfg, RngKey::new(0)).unwrap_err() {
            Error::Invalid { reason, .. } => assert!(reason.contains("612")),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn deterministic_init() {
        let a = build(&tiny(), RngKey::new(5)).unwrap();
        let b = build(&tiny(), RngKey::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(SegNetConfig { num_classes: 1, ..tiny() }.validate().is_err());
    }

    #[test]
    fn output_shape_and_simplex() {
        let cfg = SegNetConfig {
            base_width: 4,
            depth: 2,
            num_classes: 3,
            ..tiny()
        };
        let ps = build(&cfg, RngKey::new(1)).unwrap();
        let net = SegNet::new(cfg).unwrap();
        let mut r = RngKey::new(2).rng();
        let raw = Tensor::from_fn(&[10, 6], |_| r.uniform());
        let (p, _) = net.forward(&ps, &raw).unwrap();
        assert_eq!(p.shape(), &[10, 6, 3]);
        for px in p.data().chunks(3) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(px.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn deep_network_gradients() {
        use crate::gradcheck::{gradcheck, GradcheckOptions};
        for group_norm in [false, true] {
            let cfg = SegNetConfig {
                base_width: 8,
                depth: 3,
                num_classes: 3,
                group_norm,
                ..tiny()
            };
            let ps = build(&cfg, RngKey::new(1)).unwrap();
            let st = SegNetStage::new(cfg).unwrap();
            let mut r = RngKey::new(11).rng();
            let raw = Tensor::from_fn(&[8, 6], |_| r.uniform());
            let rep = gradcheck(&st, &raw, &ps, None, GradcheckOptions::default()).unwrap();
            assert!(rep.passed(), "gn={group_norm} {rep:?}");
        }
    }
}
