//! Checkpoints: a text manifest plus one little-endian `f32` blob.
//!
//! ```text
//! format rawtask-checkpoint
//! version 1
//! dtype f32le
//! step 120
//! tensors 2
//! param sensor.gamma group=sensor trainable=1 shape=1
//! param net.stem.w group=network trainable=1 shape=8,1,3,3
//! ```
//!
//! The blob holds, for each `param` line in order, the value followed by the
//! first and second AdamW moments. Values that are exact `f32` (the case
//! under `f32_storage`) round-trip bit for bit.

use std::fs;
use std::path::Path;

use rawtask_core::optim::{AdamWConfig, OptimState};
use rawtask_core::params::{Group, ParamSet};
use rawtask_core::tensor::Tensor;

use crate::error::{Result, RunError};

pub const FORMAT: &str = "rawtask-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamSet,
    pub optim: OptimState,
}

fn bad(msg: impl Into<String>) -> RunError {
    RunError::Checkpoint(msg.into())
}

fn manifest_text(params: &ParamSet, step: u64) -> String {
    let mut s = format!("format {FORMAT}\nversion {VERSION}\ndtype f32le\nstep {step}\ntensors {}\n", params.len());
    for p in params.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!(
            "param {} group={} trainable={} shape={}\n",
            p.name,
            p.group.as_str(),
            p.trainable as u8,
            shape.join(",")
        ));
    }
    s
}

/// Writes `dir/manifest.txt` and `dir/tensors.bin`.
pub fn save(dir: &Path, params: &ParamSet, optim: &OptimState) -> Result<()> {
    fs::create_dir_all(dir).map_err(RunError::io(dir))?;
    let mut blob = Vec::new();
    for p in params.iter() {
        let zeros = Tensor::zeros(p.value.shape());
        let (m, v) = optim
            .moments
            .get(&p.name)
            .map(|mo| (&mo.m, &mo.v))
            .unwrap_or((&zeros, &zeros));
        for t in [&p.value, m, v] {
            for &x in t.data() {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest_text(params, optim.step)).map_err(RunError::io(&mpath))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(RunError::io(&bpath))?;
    Ok(())
}

fn header<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines.next().ok_or_else(|| bad(format!("manifest ends before `{key}`")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
}

pub fn parse_manifest(text: &str) -> Result<(u64, Vec<Entry>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if header(&mut lines, "format")? != FORMAT {
        return Err(bad("not a rawtask checkpoint"));
    }
    let version: u32 = header(&mut lines, "version")?.parse().map_err(|_| bad("bad version"))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if header(&mut lines, "dtype")? != "f32le" {
        return Err(bad("unsupported dtype"));
    }
    let step: u64 = header(&mut lines, "step")?.parse().map_err(|_| bad("bad step"))?;
    let count: usize = header(&mut lines, "tensors")?.parse().map_err(|_| bad("bad tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for line in lines {
        let rest = line
            .strip_prefix("param ")
            .ok_or_else(|| bad(format!("unexpected line `{line}`")))?;
        let mut parts = rest.split_whitespace();
        let name = parts.next().ok_or_else(|| bad("param without name"))?.to_string();
        let (mut group, mut trainable, mut shape) = (None, None, None);
        for kv in parts {
            match kv.split_once('=') {
                Some(("group", g)) => group = Group::parse(g),
                Some(("trainable", t)) => trainable = Some(t == "1"),
                Some(("shape", s)) => {
                    shape = s.split(',').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>();
                }
                _ => return Err(bad(format!("{name}: unknown field `{kv}`"))),
            }
        }
        entries.push(Entry {
            group: group.ok_or_else(|| bad(format!("{name}: missing or bad group")))?,
            trainable: trainable.ok_or_else(|| bad(format!("{name}: missing trainable flag")))?,
            shape: shape.ok_or_else(|| bad(format!("{name}: missing or bad shape")))?,
            name,
        });
    }
    if entries.len() != count {
        return Err(bad(format!("manifest lists {} tensors, header says {count}", entries.len())));
    }
    Ok((step, entries))
}

/// Reads a checkpoint written by [`save`]. The optimizer gets `config`.
pub fn load(dir: &Path, config: AdamWConfig) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(RunError::io(&mpath))?;
    let (step, entries) = parse_manifest(&text)?;
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(RunError::io(&bpath))?;
    let need: usize = entries.iter().map(|e| 3 * 4 * e.shape.iter().product::<usize>()).sum();
    if blob.len() != need {
        return Err(bad(format!("blob has {} bytes, manifest needs {need}", blob.len())));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut params = ParamSet::new();
    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let n: usize = e.shape.iter().product();
        let mut next = || Tensor::new(&e.shape, floats.by_ref().take(n).collect());
        let (value, m, v) = (next()?, next()?, next()?);
        params.insert(&e.name, e.group, e.trainable, value)?;
        tensors.push((e.name.clone(), m, v));
    }
    let mut optim = OptimState::new(config, &params);
    optim.step = step;
    for (name, m, v) in tensors {
        optim.insert_moments(&name, m, v);
    }
    Ok(Checkpoint { step, params, optim })
}

/// Copies checkpoint values into `target`, which must hold exactly the same
/// names and shapes.
pub fn restore(target: &mut ParamSet, from: &ParamSet) -> Result<()> {
    let missing: Vec<&str> = target
        .iter()
        .filter(|p| !from.contains(&p.name))
        .map(|p| p.name.as_str())
        .collect();
    let extra: Vec<&str> = from
        .iter()
        .filter(|p| !target.contains(&p.name))
        .map(|p| p.name.as_str())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(bad(format!(
            "parameters differ from the configured pipeline (missing: [{}], unexpected: [{}])",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for p in target.iter_mut() {
        let src = from.get(&p.name)?;
        if src.shape() != p.value.shape() {
            return Err(bad(format!("{}: shape {:?} vs {:?}", p.name, src.shape(), p.value.shape())));
        }
        p.value = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rawtask_core::params::Grads;
    use rawtask_core::rng::RngKey;

    fn fixture() -> (ParamSet, OptimState) {
        let mut r = RngKey::new(9).rng();
        let mut ps = ParamSet::new();
        ps.insert("optics.zernike", Group::Optics, true, Tensor::from_fn(&[2, 3], |_| r.normal())).unwrap();
        ps.insert("sensor.sigma_s", Group::Sensor, false, Tensor::scalar(0.015)).unwrap();
        ps.insert("net.w", Group::Network, true, Tensor::from_fn(&[4, 1, 3, 3], |_| r.normal())).unwrap();
        ps.round_to_f32();
        let mut opt = OptimState::new(AdamWConfig::default(), &ps);
        let mut g = Grads::new();
        for p in ps.iter() {
            g.accumulate(&p.name, &Tensor::from_fn(p.value.shape(), |_| r.normal()));
        }
        opt.step(&mut ps, &g, 1e-2, |_| 1.0).unwrap();
        ps.round_to_f32();
        opt.round_to_f32();
        (ps, opt)
    }

    #[test]
    fn bit_exact_round_trip() {
        let (ps, opt) = fixture();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &ps, &opt).unwrap();
        let ck = load(dir.path(), AdamWConfig::default()).unwrap();
        assert_eq!(ck.step, 1);
        assert_eq!(ck.params, ps);
        for (a, b) in ck.params.iter().zip(ps.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(ck.optim, opt);
    }

    #[test]
    fn manifest_is_readable() {
        let (ps, opt) = fixture();
        let text = manifest_text(&ps, opt.step);
        assert!(text.contains("param optics.zernike group=optics trainable=1 shape=2,3"));
        let (step, entries) = parse_manifest(&text).unwrap();
        assert_eq!(step, 1);
        assert_eq!(entries.len(), 3);
        assert!(!entries[1].trainable);
    }

    #[test]
    fn truncated_blob_rejected() {
        let (ps, opt) = fixture();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &ps, &opt).unwrap();
        let b = dir.path().join(BLOB);
        let mut bytes = fs::read(&b).unwrap();
        bytes.pop();
        fs::write(&b, bytes).unwrap();
        assert!(load(dir.path(), AdamWConfig::default()).is_err());
    }

    #[test]
    fn restore_checks_names() {
        let (ps, _) = fixture();
        let mut other = ParamSet::new();
        other.insert("net.w", Group::Network, true, Tensor::zeros(&[4, 1, 3, 3])).unwrap();
        assert!(restore(&mut other, &ps).is_err());
        let mut same = ps.clone();
        same.get_mut("net.w").unwrap().scale(0.0);
        restore(&mut same, &ps).unwrap();
        assert_eq!(same, ps);
    }
}
