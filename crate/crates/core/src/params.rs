//! Named parameter stores and their gradient counterparts.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter groups. Every parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Optics,
    Sensor,
    Network,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Optics, Group::Sensor, Group::Network];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Optics => "optics",
            Group::Sensor => "sensor",
            Group::Network => "network",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "optics" => Some(Group::Optics),
            "sensor" => Some(Group::Sensor),
            "network" => Some(Group::Network),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    /// Untrainable parameters are constants of the model (never updated).
    pub trainable: bool,
    /// Frozen parameters are trainable but currently held fixed.
    pub frozen: bool,
    pub value: Tensor,
}

impl Param {
    pub fn updates(&self) -> bool {
        self.trainable && !self.frozen
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: Group, trainable: bool, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            trainable,
            frozen: false,
            value,
        });
        Ok(())
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for p in other.params {
            let frozen = p.frozen;
            self.insert(&p.name, p.group, p.trainable, p.value)?;
            self.param_mut(&p.name)?.frozen = frozen;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.param_mut(name).map(|p| &mut p.value)
    }

    pub fn set_group_frozen(&mut self, group: Group, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn group_names(&self, group: Group) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(move |p| p.group == group)
            .map(|p| p.name.as_str())
    }

    /// Total number of scalar entries, optionally restricted to one group.
    pub fn count(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// Zero gradients with the same names and shapes.
    pub fn zero_grads(&self) -> Grads {
        let mut g = Grads::default();
        for p in &self.params {
            g.map.insert(p.name.clone(), Tensor::zeros(p.value.shape()));
        }
        g
    }

    /// Rounds every value to the nearest `f32`, the checkpoint storage type.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Cotangents keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `g` into the slot for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.map.get_mut(name) {
            Some(slot) => slot.axpy(1.0, g),
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        self.map.values_mut().for_each(|t| t.scale(s));
    }

    /// Frobenius norm over the parameters of one group.
    pub fn group_norm(&self, params: &ParamSet, group: Group) -> f64 {
        let sq: f64 = params
            .group_names(group)
            .filter_map(|n| self.map.get(n))
            .map(|t| t.dot(t))
            .sum();
        num_traits::Float::sqrt(sq)
    }

    /// Zeroes the slots of frozen or untrainable parameters.
    pub fn mask_frozen(&mut self, params: &ParamSet) {
        for p in params.iter().filter(|p| !p.updates()) {
            if let Some(t) = self.map.get_mut(&p.name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Group::Network, true, Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            ps.insert("a", Group::Optics, true, Tensor::scalar(1.0)),
            Err(Error::DuplicateParam("a".into()))
        );
    }

    #[test]
    fn mask_frozen_zeroes_only_frozen() {
        let mut ps = ParamSet::new();
        ps.insert("lens", Group::Optics, true, Tensor::scalar(1.0)).unwrap();
        ps.insert("w", Group::Network, true, Tensor::scalar(1.0)).unwrap();
        ps.set_group_frozen(Group::Optics, true);
        let mut g = Grads::new();
        g.accumulate("lens", &Tensor::scalar(3.0));
        g.accumulate("w", &Tensor::scalar(4.0));
        g.mask_frozen(&ps);
        assert_eq!(g.get("lens").unwrap()[0], 0.0);
        assert_eq!(g.get("w").unwrap()[0], 4.0);
    }
}
