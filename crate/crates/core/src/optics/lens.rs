//! Lens description files.
//!
//! ```json
//! {
//!   "focal_length_mm": 4.2,
//!   "f_number": 1.8,
//!   "fov_deg": 68.0,
//!   "wavelengths_nm": [610, 530, 465],
//!   "zernike": { "grid": [1, 1], "noll_max": 6, "coeffs_waves": [[0, 0, 0, 0.1, 0, 0]] },
//!   "trainable": true
//! }
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde_json::{Map, Value};

use super::psf::PsfConfig;
use super::render::OpticsModel;
use crate::error::{Error, Result};
use crate::params::{Group, ParamSet};
use crate::tensor::Tensor;

pub const MAX_MODES: usize = 15;
pub const DEFAULT_WAVELENGTHS_NM: [f64; 3] = [610.0, 530.0, 465.0];
/// Coefficients are expressed in waves at this wavelength.
pub const REFERENCE_WAVELENGTH_NM: f64 = 530.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LensParams {
    pub focal_length_mm: f64,
    pub f_number: f64,
    pub fov_deg: f64,
    pub wavelengths_nm: Vec<f64>,
    /// `(Gy, Gx)` field grid.
    pub grid: (usize, usize),
    /// Number of Noll modes `J` per field position.
    pub modes: usize,
    /// `Gy * Gx` coefficient vectors of length `J`, in waves.
    pub coeffs: Vec<Vec<f64>>,
    pub trainable: bool,
}

/// Either a real lens or the identity sentinel used when no lens is given.
#[derive(Debug, Clone, PartialEq)]
pub enum Lens {
    Identity,
    Zernike(LensParams),
}

/// Parsed lens plus warnings about ignored keys.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLens {
    pub lens: Lens,
    pub warnings: Vec<String>,
}

impl LensParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_number > 0.0) || !self.f_number.is_finite() {
            return Err(Error::invalid("f_number", "must be > 0"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::invalid("fov_deg", "must lie in (0, 180)"));
        }
        if !(self.focal_length_mm > 0.0) || !self.focal_length_mm.is_finite() {
            return Err(Error::invalid("focal_length_mm", "must be > 0"));
        }
        if self.wavelengths_nm.is_empty() || self.wavelengths_nm.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("wavelengths_nm", "must be a non-empty list of positive values"));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::invalid("zernike.grid", "dimensions must be >= 1"));
        }
        if self.modes == 0 || self.modes > MAX_MODES {
            return Err(Error::invalid("zernike.noll_max", "must lie in 1..=15"));
        }
        if self.coeffs.len() != self.grid.0 * self.grid.1 {
            return Err(Error::invalid("zernike.coeffs_waves", "needs Gy*Gx coefficient vectors"));
        }
        if self.coeffs.iter().any(|c| c.len() != self.modes) {
            return Err(Error::invalid("zernike.coeffs_waves", "every vector needs noll_max entries"));
        }
        if self.coeffs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("zernike.coeffs_waves", "values must be finite"));
        }
        Ok(())
    }

    /// A 1x1 lens with a single defocus term (Noll 4).
    pub fn defocus(waves: f64, modes: usize) -> Self {
        let mut c = vec![0.0; modes.max(4)];
        c[3] = waves;
        Self {
            focal_length_mm: 4.0,
            f_number: 2.0,
            fov_deg: 68.0,
            wavelengths_nm: DEFAULT_WAVELENGTHS_NM.to_vec(),
            grid: (1, 1),
            modes: c.len(),
            coeffs: vec![c],
            trainable: true,
        }
    }

    pub fn optics_model(&self, psf: PsfConfig) -> OpticsModel {
        OpticsModel {
            grid: self.grid,
            modes: self.modes,
            wave_scales: self
                .wavelengths_nm
                .iter()
                .map(|w| REFERENCE_WAVELENGTH_NM / w)
                .collect(),
            psf,
        }
    }

    /// Registers the coefficient tensor `[Gy*Gx, J]` in `params`.
    pub fn register(&self, params: &mut ParamSet, name: &str) -> Result<()> {
        let data = self.coeffs.iter().flatten().copied().collect();
        let t = Tensor::new(&[self.coeffs.len(), self.modes], data)?;
        params.insert(name, Group::Optics, self.trainable, t)
    }
}

fn real(obj: &Map<String, Value>, key: &str) -> Result<f64> {
    obj.get(key)
        .ok_or_else(|| Error::invalid(key, "missing"))?
        .as_f64()
        .ok_or_else(|| Error::invalid(key, "expected a number"))
}

fn uint(v: &Value, key: &str) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::invalid(key, "expected a non-negative integer"))
}

fn check_keys(obj: &Map<String, Value>, known: &[&str], prefix: &str, warnings: &mut Vec<String>) {
    for k in obj.keys() {
        if !known.contains(&k.as_str()) {
            warnings.push(format!("ignoring unknown lens key `{prefix}{k}`"));
        }
    }
}

/// Parses a lens file. Empty text, `null` or `{}` yield the identity lens.
pub fn load_lens(json_text: &str) -> Result<LoadedLens> {
    let mut warnings = Vec::new();
    if json_text.trim().is_empty() {
        return Ok(LoadedLens {
            lens: Lens::Identity,
            warnings,
        });
    }
    let root: Value = serde_json::from_str(json_text).map_err(|e| Error::Json(e.to_string()))?;
    let obj = match root {
        Value::Null => {
            return Ok(LoadedLens {
                lens: Lens::Identity,
                warnings,
            })
        }
        Value::Object(o) if o.is_empty() => {
            return Ok(LoadedLens {
                lens: Lens::Identity,
                warnings,
            })
        }
        Value::Object(o) => o,
        _ => return Err(Error::Json("lens file must be a JSON object".into())),
    };
    check_keys(
        &obj,
        &["focal_length_mm", "f_number", "fov_deg", "wavelengths_nm", "zernike", "trainable"],
        "",
        &mut warnings,
    );

    let focal_length_mm = real(&obj, "focal_length_mm")?;
    let f_number = real(&obj, "f_number")?;
    let fov_deg = real(&obj, "fov_deg")?;
    let wavelengths_nm = match obj.get("wavelengths_nm") {
        None => DEFAULT_WAVELENGTHS_NM.to_vec(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| Error::invalid("wavelengths_nm", "expected numbers")))
            .collect::<Result<_>>()?,
        Some(_) => return Err(Error::invalid("wavelengths_nm", "expected an array")),
    };
    let trainable = match obj.get("trainable") {
        None => true,
        Some(v) => v
            .as_bool()
            .ok_or_else(|| Error::invalid("trainable", "expected a boolean"))?,
    };

    let z = obj
        .get("zernike")
        .ok_or_else(|| Error::invalid("zernike", "missing"))?
        .as_object()
        .ok_or_else(|| Error::invalid("zernike", "expected an object"))?;
    check_keys(z, &["grid", "noll_max", "coeffs_waves"], "zernike.", &mut warnings);
    let grid = match z.get("grid") {
        Some(Value::Array(a)) if a.len() == 2 => (uint(&a[0], "zernike.grid")?, uint(&a[1], "zernike.grid")?),
        Some(_) => return Err(Error::invalid("zernike.grid", "expected [Gy, Gx]")),
        None => return Err(Error::invalid("zernike.grid", "missing")),
    };
    let modes = uint(
        z.get("noll_max").ok_or_else(|| Error::invalid("zernike.noll_max", "missing"))?,
        "zernike.noll_max",
    )?;
    let coeffs = match z.get("coeffs_waves") {
        Some(Value::Array(rows)) => rows
            .iter()
            .map(|row| match row {
                Value::Array(vals) => vals
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .ok_or_else(|| Error::invalid("zernike.coeffs_waves", "expected numbers"))
                    })
                    .collect::<Result<Vec<_>>>(),
                _ => Err(Error::invalid("zernike.coeffs_waves", "expected arrays of numbers")),
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::invalid("zernike.coeffs_waves", "expected an array")),
        None => return Err(Error::invalid("zernike.coeffs_waves", "missing")),
    };

    let lens = LensParams {
        focal_length_mm,
        f_number,
        fov_deg,
        wavelengths_nm,
        grid,
        modes,
        coeffs,
        trainable,
    };
    lens.validate()?;
    Ok(LoadedLens {
        lens: Lens::Zernike(lens),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LENS_68: &str = r#"{
        "focal_length_mm": 4.2, "f_number": 1.8, "fov_deg": 68,
        "zernike": {"grid": [1, 1], "noll_max": 6, "coeffs_waves": [[0, 0, 0, 0.1, 0.05, 0]]}
    }"#;

    #[test]
    fn parses_fov_and_defaults() {
        let l = load_lens(LENS_68).unwrap();
        let Lens::Zernike(p) = l.lens else { panic!() };
        assert_eq!(p.fov_deg, 68.0);
        assert_eq!(p.wavelengths_nm, DEFAULT_WAVELENGTHS_NM.to_vec());
        assert!(p.trainable);
        assert!(l.warnings.is_empty());
    }

    #[test]
    fn empty_is_identity() {
        assert_eq!(load_lens("").unwrap().lens, Lens::Identity);
        assert_eq!(load_lens("{}").unwrap().lens, Lens::Identity);
        assert_eq!(load_lens("null").unwrap().lens, Lens::Identity);
    }

    #[test]
    fn zero_f_number_rejected() {
        let text = LENS_68.replace("1.8", "0");
        assert_eq!(
            load_lens(&text).unwrap_err(),
            Error::invalid("f_number", "must be > 0")
        );
    }

    #[test]
    fn missing_key_named() {
        let text = LENS_68.replace("\"fov_deg\": 68,", "");
        match load_lens(&text).unwrap_err() {
            Error::Invalid { key, .. } => assert_eq!(key, "fov_deg"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unknown_keys_warn() {
        let text = LENS_68.replace("\"fov_deg\"", "\"vendor\": \"x\", \"fov_deg\"");
        let l = load_lens(&text).unwrap();
        assert_eq!(l.warnings.len(), 1);
        assert!(l.warnings[0].contains("vendor"));
    }

    #[test]
    fn too_many_modes_rejected() {
        let mut p = LensParams::defocus(0.5, 4);
        p.modes = 16;
        p.coeffs = vec![vec![0.0; 16]];
        assert!(p.validate().is_err());
    }
}
