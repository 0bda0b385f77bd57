//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rawtask_core::data::{corrupt, CorruptionSpec, Sample, CLASS_NAMES, SCENE_CLASSES};
use rawtask_core::metrics::{argmax, MetricsReport};
use rawtask_core::optim::OptimState;
use rawtask_core::params::ParamSet;
use rawtask_core::pipeline::suite::{run_suite, CASES};
use rawtask_core::pipeline::{train, EpochRecord, Pipeline, TrainObserver};
use rawtask_core::rng::RngKey;
use rawtask_core::stage::stage_id;

use crate::checkpoint;
use crate::config::{RunConfig, VAL_SEED_OFFSET};
use crate::dataset::{label_image, read_rgb, save_dataset, write_gray, write_rgb, DataSource};
use crate::error::{Result, RunError};
use crate::report::{write_report, write_text, MetricsLog};

#[derive(Debug, Parser)]
#[command(name = "rawtask", version, about = "Differentiable RAW-to-task camera pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-phase training from a run config.
    Train(TrainArgs),
    /// Metrics of a checkpoint on a dataset, optionally corrupted.
    Eval(EvalArgs),
    /// Finite-difference checks of the differentiable stages.
    Gradcheck(GradcheckArgs),
    /// PNG dump of every pipeline intermediate for one image.
    Render(RenderArgs),
    /// Writes a corrupted copy of a dataset.
    Corrupt(CorruptArgs),
    /// Writes a synthetic dataset.
    Genscenes(GenArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` override; bare keys resolve to the unique block holding them.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training data: a dataset directory or `synthetic:<n>`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub val: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorruptKind {
    Blur,
    Noise,
    Bitdepth,
    ExposureShift,
}

#[derive(Debug, Args)]
pub struct CorruptionArgs {
    #[arg(long = "kind")]
    pub kind: Option<CorruptKind>,
    #[arg(long, default_value_t = 1.0)]
    pub waves: f64,
    #[arg(long, default_value_t = 0.015)]
    pub sigma_s: f64,
    #[arg(long, default_value_t = 0.002)]
    pub sigma_r: f64,
    #[arg(long = "corrupt-bits", default_value_t = 8)]
    pub corrupt_bits: u32,
    #[arg(long, default_value_t = 0.5)]
    pub gain: f64,
    #[arg(long = "corrupt-seed", default_value_t = 0)]
    pub corrupt_seed: u64,
}

impl CorruptionArgs {
    pub fn spec(&self) -> Option<CorruptionSpec> {
        self.kind.map(|k| match k {
            CorruptKind::Blur => CorruptionSpec::Blur { waves: self.waves },
            CorruptKind::Noise => CorruptionSpec::Noise {
                sigma_s: self.sigma_s,
                sigma_r: self.sigma_r,
            },
            CorruptKind::Bitdepth => CorruptionSpec::Bitdepth { bits: self.corrupt_bits },
            CorruptKind::ExposureShift => CorruptionSpec::ExposureShift { gain: self.gain },
        })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint directory (holding `manifest.txt`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the config's validation data.
    #[arg(long)]
    pub data: Option<String>,
    /// Sensor bit depth at evaluation.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Runs the noise stage keyed from this seed.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Stage labels to check; all when omitted.
    #[arg(long = "stage")]
    pub stages: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// PNG image or `synthetic:<seed>`.
    #[arg(long)]
    pub image: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 19)]
    pub classes: usize,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_config(a: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let mut sets = extra;
    sets.extend(a.set.iter().cloned());
    let mut cfg = RunConfig::load(&a.config, &sets)?;
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn warn(msgs: &[String]) {
    for m in msgs {
        eprintln!("warning: {m}");
    }
}

fn class_names(classes: usize) -> Vec<&'static str> {
    if classes == SCENE_CLASSES {
        CLASS_NAMES.to_vec()
    } else {
        Vec::new()
    }
}

/// Training and validation sets of a config.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let classes = cfg.network.num_classes;
    let train = DataSource::parse(&cfg.data.train)?.load(classes, cfg.data.size, cfg.data.seed)?;
    warn(&train.warnings);
    let val = if cfg.data.val.trim().is_empty() {
        Vec::new()
    } else {
        let v = DataSource::parse(&cfg.data.val)?.load(classes, cfg.data.size, cfg.data.seed + VAL_SEED_OFFSET)?;
        warn(&v.warnings);
        v.samples
    };
    Ok((train.samples, val))
}

struct RunObserver {
    dir: PathBuf,
    log: MetricsLog,
}

impl TrainObserver for RunObserver {
    fn checkpoint(&mut self, epoch: usize, params: &ParamSet, optim: &OptimState) -> rawtask_core::error::Result<()> {
        let dir = self.dir.join("checkpoints").join(format!("epoch_{epoch:03}"));
        checkpoint::save(&dir, params, optim).map_err(|e| rawtask_core::error::Error::invalid("checkpoint", e.to_string()))
    }

    fn epoch(&mut self, r: &EpochRecord) -> rawtask_core::error::Result<()> {
        self.log
            .push(r)
            .map_err(|e| rawtask_core::error::Error::invalid("metrics", e.to_string()))
    }
}

/// Outcome of [`run_train`].
pub struct TrainRun {
    pub pipeline: Pipeline,
    pub params: ParamSet,
    pub log: Vec<EpochRecord>,
    pub report: MetricsReport,
}

/// Validates `cfg`, trains, and writes `config.toml`, `metrics.csv`,
/// `checkpoints/epoch_NNN/`, `report.csv` and `report.png` under `cfg.out`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    let mut pipe = cfg.validate()?;
    let (_, lens_warnings) = cfg.lens()?;
    warn(&lens_warnings);
    let (train_set, val_set) = datasets(cfg)?;
    if train_set.is_empty() {
        return Err(RunError::Data("training set is empty".into()));
    }
    fs::create_dir_all(&cfg.out).map_err(RunError::io(&cfg.out))?;
    write_text(&cfg.out.join("config.toml"), &cfg.to_toml()?)?;
    let mut params = pipe.init_params(RngKey::new(cfg.training.seed).for_stage(stage_id("init")))?;
    let mut obs = RunObserver {
        dir: cfg.out.clone(),
        log: MetricsLog::create(&cfg.out.join("metrics.csv"))?,
    };
    let outcome = train(&mut pipe, &mut params, &train_set, &val_set, &cfg.training, &mut obs)?;
    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
    let report = pipe.evaluate(&params, eval_set, None)?;
    write_report(&cfg.out, &report, &class_names(cfg.network.num_classes))?;
    Ok(TrainRun {
        pipeline: pipe,
        params,
        log: outcome.log,
        report,
    })
}

/// Pipeline and parameters of a config with checkpoint values restored.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Pipeline, ParamSet)> {
    let pipe = cfg.validate()?;
    let mut params = pipe.init_params(RngKey::new(cfg.training.seed).for_stage(stage_id("init")))?;
    let ck = checkpoint::load(ckpt, cfg.training.adamw())?;
    checkpoint::restore(&mut params, &ck.params)?;
    Ok((pipe, params))
}

/// Applies `spec` to every image, keyed per sample.
pub fn corrupt_all(samples: &[Sample], spec: &CorruptionSpec, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let key = RngKey::new(seed).at_step(i as u64);
            Ok(Sample {
                image: corrupt(&s.image, spec, key)?,
                labels: s.labels.clone(),
            })
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(e) = a.epochs {
        extra.push(format!("training.epochs={e}"));
    }
    if let Some(d) = &a.data {
        extra.push(format!("data.train=\"{d}\""));
    }
    if let Some(v) = &a.val {
        extra.push(format!("data.val=\"{v}\""));
    }
    let cfg = load_config(&a.cfg, extra)?;
    let run = match run_train(&cfg) {
        Err(e @ RunError::Core(rawtask_core::error::Error::NonFinite(_))) => {
            eprintln!("aborted; last good checkpoint kept under {}", cfg.out.join("checkpoints").display());
            return Err(e);
        }
        r => r?,
    };
    let last = run.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs: val mIoU {:.4}, pixel acc {:.4} -> {}",
        last.epoch,
        run.report.miou,
        run.report.pixel_acc,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(b) = a.bits {
        extra.push(format!("sensor.bits={b}"));
    }
    let cfg = load_config(&a.cfg, extra)?;
    let (pipe, params) = load_model(&cfg, &a.checkpoint)?;
    let classes = cfg.network.num_classes;
    let spec = a.data.as_deref().unwrap_or(&cfg.data.val);
    let loaded = DataSource::parse(spec)?.load(classes, cfg.data.size, cfg.data.seed + VAL_SEED_OFFSET)?;
    warn(&loaded.warnings);
    let mut data = loaded.samples;
    if let Some(c) = a.corruption.spec() {
        c.validate().map_err(|e| RunError::Config(e.to_string()))?;
        data = corrupt_all(&data, &c, a.corruption.corrupt_seed)?;
    }
    if data.is_empty() {
        return Err(RunError::Data("evaluation set is empty".into()));
    }
    let report = pipe.evaluate(&params, &data, a.noise_seed)?;
    write_report(&cfg.out, &report, &class_names(classes))?;
    println!("mIoU {:.4}, pixel acc {:.4} -> {}", report.miou, report.pixel_acc, cfg.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let labels: Vec<&str> = a.stages.iter().map(String::as_str).collect();
    for l in &labels {
        if !CASES.contains(l) {
            return Err(RunError::Config(format!(
                "unknown stage `{l}`; known: {}",
                CASES.join(", ")
            )));
        }
    }
    let results = run_suite(&labels, 0..a.seeds)?;
    let mut failed = Vec::new();
    println!("{:<18} {:>6} {:>12}  result", "stage", "seeds", "max rel err");
    let chosen: Vec<&str> = if labels.is_empty() { CASES.to_vec() } else { labels };
    for label in chosen {
        let rows: Vec<_> = results.iter().filter(|r| r.label == label).collect();
        let worst = rows
            .iter()
            .flat_map(|r| r.report.entries.iter())
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max);
        let ok = rows.iter().all(|r| r.report.passed());
        if !ok {
            failed.push(label.to_string());
        }
        println!(
            "{label:<18} {:>6} {worst:>12.3e}  {}",
            rows.len(),
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(RunError::Gradcheck(failed.join(", ")))
    }
}

fn palette(class: u8) -> [u8; 3] {
    const P: [[u8; 3]; 8] = [
        [128, 64, 128],
        [70, 70, 70],
        [153, 153, 153],
        [220, 220, 0],
        [70, 130, 180],
        [107, 142, 35],
        [220, 20, 60],
        [0, 0, 142],
    ];
    if class == rawtask_core::data::IGNORE {
        [0, 0, 0]
    } else {
        P[class as usize % P.len()]
    }
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, Vec::new())?;
    let (pipe, params) = match &a.checkpoint {
        Some(c) => load_model(&cfg, c)?,
        None => {
            let pipe = cfg.validate()?;
            let params = pipe.init_params(RngKey::new(cfg.training.seed).for_stage(stage_id("init")))?;
            (pipe, params)
        }
    };
    let image = match a.image.strip_prefix("synthetic:") {
        Some(s) => {
            let seed = s
                .parse()
                .map_err(|_| RunError::Config(format!("bad scene seed in `{}`", a.image)))?;
            rawtask_core::data::generate_scenes(1, seed, cfg.data.size, cfg.data.size)?.remove(0).image
        }
        None => read_rgb(Path::new(&a.image))?,
    };
    let fwd = pipe.forward(&image, &params, Some(RngKey::new(a.noise_seed)), true)?;
    let dir = cfg.out.join("renders");
    fs::create_dir_all(&dir).map_err(RunError::io(&dir))?;
    write_rgb(&image, &dir.join("00_input.png"))?;
    for (i, (name, t)) in fwd.intermediates.iter().enumerate() {
        if name == "segnet" {
            continue;
        }
        let path = dir.join(format!("{:02}_{name}.png", i + 1));
        match t.shape().len() {
            3 => write_rgb(t, &path)?,
            _ => write_gray(t, &path)?,
        }
    }
    let pred = argmax(&fwd.probs)?;
    let mut rgb = image::RgbImage::new(pred.width as u32, pred.height as u32);
    for (p, &c) in rgb.pixels_mut().zip(&pred.data) {
        *p = image::Rgb(palette(c));
    }
    let n = fwd.intermediates.len();
    let path = dir.join(format!("{n:02}_prediction.png"));
    rgb.save(&path).map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?;
    let path = dir.join(format!("{n:02}_prediction_index.png"));
    label_image(&pred)
        .save(&path)
        .map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?;
    println!("wrote {} images to {}", n + 2, dir.display());
    Ok(())
}

fn cmd_corrupt(a: CorruptArgs) -> Result<()> {
    let spec = a
        .corruption
        .spec()
        .ok_or_else(|| RunError::Config("--kind is required".into()))?;
    spec.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let loaded = DataSource::parse(&a.data)?.load(a.classes, a.size, a.seed)?;
    warn(&loaded.warnings);
    let out = corrupt_all(&loaded.samples, &spec, a.corruption.corrupt_seed)?;
    save_dataset(&a.out, &out)?;
    println!("wrote {} {} samples to {}", out.len(), spec.kind(), a.out.display());
    Ok(())
}

fn cmd_genscenes(a: GenArgs) -> Result<()> {
    let scenes = rawtask_core::data::generate_scenes(a.n, a.seed, a.size, a.size)?;
    save_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Render(a) => cmd_render(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Genscenes(a) => cmd_genscenes(a),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
