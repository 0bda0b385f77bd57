//! Single network blocks wrapped as stages, for gradient checking.
//!
//! Inputs are `[C, H, W]` activations.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::layers::{se_backward, se_forward, SeCache};
use super::net::{ds_backward, ds_forward, DsCache};
use crate::error::{Error, Result};
use crate::params::{Grads, Group, ParamSet};
use crate::rng::RngKey;
use crate::stage::{Adjoint, Stage};
use crate::tensor::Tensor;

fn chw(t: &Tensor, c: usize, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [cc, h, w] if *cc == c => Ok((*h, *w)),
        s => Err(Error::shape(what, &[c, 0, 0], s)),
    }
}

fn he(shape: &[usize], fan_in: usize, rng: &mut crate::rng::KeyedRng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// Depthwise 3x3 conv, pointwise conv, optional group norm, ReLU.
pub struct DsBlockStage {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub group_norm: bool,
}

impl DsBlockStage {
    /// Registers randomly initialized block parameters (biases included, so
    /// every parameter gets a nontrivial check).
    pub fn init(&self, params: &mut ParamSet, key: RngKey) -> Result<()> {
        let mut r = key.rng();
        let p = &self.prefix;
        params.insert(&format!("{p}.dw.w"), Group::Network, true, he(&[self.c_in, 3, 3], 9, &mut r))?;
        params.insert(&format!("{p}.dw.b"), Group::Network, true, he(&[self.c_in], 4, &mut r))?;
        params.insert(&format!("{p}.pw.w"), Group::Network, true, he(&[self.c_out, self.c_in], self.c_in, &mut r))?;
        params.insert(&format!("{p}.pw.b"), Group::Network, true, he(&[self.c_out], 4, &mut r))?;
        if self.group_norm {
            let g = Tensor::from_fn(&[self.c_out], |_| 1.0 + 0.2 * r.normal());
            params.insert(&format!("{p}.gn.g"), Group::Network, true, g)?;
            params.insert(&format!("{p}.gn.b"), Group::Network, true, he(&[self.c_out], 8, &mut r))?;
        }
        Ok(())
    }
}

struct DsAdj<'a> {
    params: &'a ParamSet,
    cache: DsCache,
    in_shape: Vec<usize>,
}

impl Adjoint for DsAdj<'_> {
    fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let g = ds_backward(self.params, &self.cache, ct.data().to_vec(), grads)?;
        Tensor::new(&self.in_shape, g)
    }
}

impl Stage for DsBlockStage {
    fn name(&self) -> &str {
        "segnet.ds_block"
    }

    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["dw.w", "dw.b", "pw.w", "pw.b"]
            .iter()
            .map(|s| format!("{}.{s}", self.prefix))
            .collect();
        if self.group_norm {
            v.push(format!("{}.gn.g", self.prefix));
            v.push(format!("{}.gn.b", self.prefix));
        }
        v
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let (h, w) = chw(input, self.c_in, "ds block input")?;
        let (y, cache) = ds_forward(
            params,
            &self.prefix,
            input.data().to_vec(),
            self.c_in,
            self.c_out,
            h,
            w,
            self.group_norm,
        )?;
        Ok((
            Tensor::new(&[self.c_out, h, w], y)?,
            Box::new(DsAdj {
                params,
                cache,
                in_shape: input.shape().to_vec(),
            }),
        ))
    }
}

/// Squeeze-and-excitation gate.
pub struct SeBlockStage {
    pub prefix: String,
    pub channels: usize,
    pub hidden: usize,
}

impl SeBlockStage {
    pub fn init(&self, params: &mut ParamSet, key: RngKey) -> Result<()> {
        let mut r = key.rng();
        let (c, h, p) = (self.channels, self.hidden, &self.prefix);
        params.insert(&format!("{p}.w1"), Group::Network, true, he(&[h, c], c, &mut r))?;
        params.insert(&format!("{p}.b1"), Group::Network, true, he(&[h], 4, &mut r))?;
        params.insert(&format!("{p}.w2"), Group::Network, true, he(&[c, h], h, &mut r))?;
        params.insert(&format!("{p}.b2"), Group::Network, true, he(&[c], 4, &mut r))?;
        Ok(())
    }

    fn names(&self) -> [String; 4] {
        let p = &self.prefix;
        [format!("{p}.w1"), format!("{p}.b1"), format!("{p}.w2"), format!("{p}.b2")]
    }
}

struct SeAdj<'a> {
    stage: &'a SeBlockStage,
    params: &'a ParamSet,
    x: Tensor,
    cache: SeCache,
}

impl Adjoint for SeAdj<'_> {
    fn backward(&self, ct: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let [n1, n2, n3, n4] = self.stage.names();
        let c = self.stage.channels;
        let hw = self.x.len() / c;
        let (gx, gw1, gb1, gw2, gb2) = se_backward(
            self.x.data(),
            c,
            hw,
            self.params.get(&n1)?.data(),
            self.params.get(&n3)?.data(),
            &self.cache,
            ct.data(),
        );
        for (n, g) in [(n1, gw1), (n2, gb1), (n3, gw2), (n4, gb2)] {
            let shape = self.params.get(&n)?.shape().to_vec();
            grads.accumulate(&n, &Tensor::new(&shape, g)?);
        }
        Tensor::new(self.x.shape(), gx)
    }
}

impl Stage for SeBlockStage {
    fn name(&self) -> &str {
        "segnet.se_block"
    }

    fn param_names(&self) -> Vec<String> {
        self.names().to_vec()
    }

    fn forward<'a>(
        &'a self,
        input: &Tensor,
        params: &'a ParamSet,
        _: Option<RngKey>,
    ) -> Result<(Tensor, Box<dyn Adjoint + 'a>)> {
        let (h, w) = chw(input, self.channels, "se block input")?;
        let [n1, n2, n3, n4] = self.names();
        let (y, cache) = se_forward(
            input.data(),
            self.channels,
            h * w,
            params.get(&n1)?.data(),
            params.get(&n2)?.data(),
            params.get(&n3)?.data(),
            params.get(&n4)?.data(),
        );
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segnet se block".into()));
        }
        Ok((
            Tensor::new(&[self.channels, h, w], y)?,
            Box::new(SeAdj {
                stage: self,
                params,
                x: input.clone(),
                cache,
            }),
        ))
    }
}
