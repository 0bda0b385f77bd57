//! Run configuration: one TOML file holding every module block, with
//! `--set key=value` overrides applied before validation.
//!
//! ```toml
//! lens = "lenses/fov68.json"   # omit for the identity lens
//! out = "runs/demo"
//!
//! [data]
//! train = "synthetic:200"      # or a dataset directory
//! val = "synthetic:50"         # empty string: validate on the training set
//! size = 64
//! seed = 0
//!
//! [psf]       # pupil_samples, kernel_size
//! [sensor]    # exposure_gamma_init, cfa_layout, sigma_s, sigma_r, bits, soft_cfa_selection
//! [network]   # base_width, depth, num_classes, se_reduction, param_budget, group_norm
//! [loss]      # hard_fraction, min_kept, lambda_smooth, tau_w, adaptive
//! [switches]  # optics_on, exposure_on, cfa_on, cfa_learnable, exposure_learnable, noise_on, quant_on
//! [training]  # epochs, warmup_epochs, batch_size, seed, throttle, lr, weight_decay,
//!             # tau_start, tau_end, f32_storage
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use rawtask_core::losses::LossConfig;
use rawtask_core::optics::lens::{load_lens, Lens};
use rawtask_core::optics::psf::PsfConfig;
use rawtask_core::pipeline::{Pipeline, PipelineConfig, SensorConfig, Switches, TrainSchedule};
use rawtask_core::segnet::SegNetConfig;

use crate::error::{Result, RunError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: String,
    pub val: String,
    /// Side of synthetic scenes.
    pub size: usize,
    /// First synthetic scene seed; validation scenes start at `seed + 1_000_000`.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: "synthetic:200".into(),
            val: "synthetic:50".into(),
            size: 64,
            seed: 0,
        }
    }
}

pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lens: Option<PathBuf>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub psf: PsfConfig,
    pub sensor: SensorConfig,
    pub network: SegNetConfig,
    pub loss: LossConfig,
    pub switches: Switches,
    pub training: TrainSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lens: None,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            psf: PsfConfig::default(),
            sensor: SensorConfig::default(),
            network: SegNetConfig {
                num_classes: rawtask_core::data::SCENE_CLASSES,
                ..SegNetConfig::default()
            },
            loss: LossConfig::default(),
            switches: Switches::default(),
            training: TrainSchedule::default(),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Dotted path for `key`: kept as is when it contains a dot or names a
/// top-level entry, otherwise the unique block holding that key.
fn resolve_key(key: &str) -> Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let defaults = Value::try_from(RunConfig::default()).map_err(|e| RunError::Config(e.to_string()))?;
    let table = defaults.as_table().expect("config serializes to a table");
    if table.contains_key(key) || key == "lens" {
        return Ok(vec![key.into()]);
    }
    let blocks: Vec<&String> = table
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(k, _)| k)
        .collect();
    match blocks.as_slice() {
        [one] => Ok(vec![(*one).clone(), key.into()]),
        [] => Err(RunError::Config(format!("unknown override key `{key}`"))),
        many => Err(RunError::Config(format!(
            "override key `{key}` is ambiguous between {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Applies one `key=value` override to a raw config table.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{spec}` is not key=value")))?;
    let path = resolve_key(key.trim())?;
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let next = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| RunError::Config(format!("`{p}` is not a table")))?;
    }
    cur.insert(last.clone(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies overrides. Unknown keys are rejected with
    /// their dotted path.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| RunError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            RunError::Config(format!("at `{path}`: {}", e.into_inner()))
        })
    }

    /// Loads a config file; a relative `lens` path is taken relative to the file.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(lens) = &cfg.lens {
            if lens.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.lens = Some(base.join(lens));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Reads the lens file, if any.
    pub fn lens(&self) -> Result<(Lens, Vec<String>)> {
        match &self.lens {
            None => Ok((Lens::Identity, Vec::new())),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| RunError::Config(format!("cannot read lens {}: {e}", p.display())))?;
                let loaded = load_lens(&text).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
                Ok((loaded.lens, loaded.warnings))
            }
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let (lens, _) = self.lens()?;
        Ok(PipelineConfig {
            lens,
            psf: self.psf,
            sensor: self.sensor.clone(),
            network: self.network,
            loss: self.loss,
            switches: self.switches,
        })
    }

    /// Checks every block and builds the pipeline.
    pub fn validate(&self) -> Result<Pipeline> {
        self.training.validate().map_err(|e| RunError::Config(e.to_string()))?;
        if self.data.size < rawtask_core::data::MIN_SCENE_SIZE {
            return Err(RunError::Config(format!(
                "data.size must be >= {}",
                rawtask_core::data::MIN_SCENE_SIZE
            )));
        }
        Pipeline::new(self.pipeline_config()?).map_err(|e| RunError::Config(e.to_string()))
    }
}
