//! Dataset directories: `root/images/*.png` (8-bit RGB) and
//! `root/labels/*.png` (8-bit class indices, 255 = ignore), matched by file
//! name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use rawtask_core::data::{generate_scenes, LabelMap, Sample};
use rawtask_core::tensor::Tensor;

use crate::error::{Result, RunError};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic(usize),
    Dir(PathBuf),
}

impl DataSource {
    /// `synthetic:<n>` or a directory path.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.strip_prefix("synthetic:") {
            Some(n) => n
                .parse()
                .map(DataSource::Synthetic)
                .map_err(|_| RunError::Config(format!("bad scene count in `{spec}`"))),
            None => Ok(DataSource::Dir(PathBuf::from(spec))),
        }
    }

    /// Loads the samples. Synthetic scenes are `size` square and seeded from `seed`.
    pub fn load(&self, classes: usize, size: usize, seed: u64) -> Result<Loaded> {
        match self {
            DataSource::Synthetic(n) => Ok(Loaded {
                samples: generate_scenes(*n, seed, size, size)?,
                warnings: Vec::new(),
            }),
            DataSource::Dir(root) => load_dataset(root, classes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(RunError::io(dir))? {
        let path = entry.map_err(RunError::io(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .map_err(RunError::io(path))?
        .decode()
        .map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = ImageReader::open(path)
        .map_err(RunError::io(path))?
        .decode()
        .map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?;
    if img.color() != image::ColorType::L8 {
        return Err(RunError::Data(format!("{}: labels must be 8-bit single channel", path.display())));
    }
    let img = img.to_luma8();
    let (w, h) = img.dimensions();
    Ok(LabelMap::new(h as usize, w as usize, img.into_raw())?)
}

/// Loads every matched pair, sorted by file name. An empty or missing
/// directory gives an empty dataset and a warning.
pub fn load_dataset(root: &Path, classes: usize) -> Result<Loaded> {
    let images = png_stems(&root.join("images"))?;
    let labels = png_stems(&root.join("labels"))?;
    let mut orphans: Vec<String> = images
        .keys()
        .filter(|k| !labels.contains_key(*k))
        .map(|k| format!("images/{k}.png"))
        .collect();
    orphans.extend(
        labels
            .keys()
            .filter(|k| !images.contains_key(*k))
            .map(|k| format!("labels/{k}.png")),
    );
    if !orphans.is_empty() {
        return Err(RunError::Data(format!(
            "{}: unmatched files: {}",
            root.display(),
            orphans.join(", ")
        )));
    }
    let mut warnings = Vec::new();
    if images.is_empty() {
        warnings.push(format!("{}: dataset is empty", root.display()));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let image = read_rgb(img_path)?;
        let lbl_path = &labels[stem];
        let lbl = read_labels(lbl_path)?;
        if (lbl.height, lbl.width) != (image.shape()[0], image.shape()[1]) {
            return Err(RunError::Data(format!("{stem}: image and label sizes differ")));
        }
        lbl.validate(classes)
            .map_err(|e| RunError::Data(format!("{}: {e}", lbl_path.display())))?;
        samples.push(Sample { image, labels: lbl });
    }
    Ok(Loaded { samples, warnings })
}

/// 8-bit RGB rendering of an `[H, W, 3]` tensor, clamped to `[0, 1]`.
pub fn rgb_image(t: &Tensor) -> Result<RgbImage> {
    let (h, w, c) = t.hwc()?;
    if c != 3 {
        return Err(RunError::Data(format!("expected 3 channels, got {c}")));
    }
    let raw = t.data().iter().map(|&v| to_u8(v)).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"))
}

/// 8-bit gray rendering of an `[H, W]` tensor, clamped to `[0, 1]`.
pub fn gray_image(t: &Tensor) -> Result<GrayImage> {
    let (h, w, c) = t.hwc()?;
    if c != 1 {
        return Err(RunError::Data(format!("expected 1 channel, got {c}")));
    }
    let raw = t.data().iter().map(|&v| to_u8(v)).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn label_image(l: &LabelMap) -> GrayImage {
    GrayImage::from_raw(l.width as u32, l.height as u32, l.data.clone()).expect("buffer size matches")
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| RunError::Data(format!("{}: {e}", path.display())))
}

pub fn write_rgb(t: &Tensor, path: &Path) -> Result<()> {
    save_png(&rgb_image(t)?, path)
}

pub fn write_gray(t: &Tensor, path: &Path) -> Result<()> {
    save_png(&gray_image(t)?, path)
}

/// Writes `samples` as `root/images/NNNNN.png` and `root/labels/NNNNN.png`.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "labels"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(RunError::io(&d))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        write_rgb(&s.image, &root.join("images").join(&name))?;
        save_png(&label_image(&s.labels), &root.join("labels").join(&name))?;
    }
    Ok(())
}
