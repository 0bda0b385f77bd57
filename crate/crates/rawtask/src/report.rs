//! Metrics log and evaluation report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};

use rawtask_core::metrics::MetricsReport;
use rawtask_core::pipeline::EpochRecord;

use crate::error::{Result, RunError};

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "l_ohem",
    "l_lovasz",
    "l_smooth",
    "l_total",
    "lr",
    "tau_pi",
    "val_miou",
    "val_pixel_acc",
];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RunError + '_ {
    move |e| RunError::Data(format!("{}: {e}", path.display()))
}

/// Appends epoch rows to `metrics.csv`, writing the header when the file is new.
pub struct MetricsLog {
    writer: csv::Writer<fs::File>,
    path: std::path::PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
        writer.write_record(METRICS_HEADER).map_err(csv_err(path))?;
        writer.flush().map_err(RunError::io(path))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn push(&mut self, r: &EpochRecord) -> Result<()> {
        let row = [
            r.epoch.to_string(),
            r.l_ohem.to_string(),
            r.l_lovasz.to_string(),
            r.l_smooth.to_string(),
            r.l_total.to_string(),
            r.lr.to_string(),
            r.tau_pi.to_string(),
            r.val_miou.to_string(),
            r.val_pixel_acc.to_string(),
        ];
        self.writer.write_record(&row).map_err(csv_err(&self.path))?;
        self.writer.flush().map_err(RunError::io(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = rd.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(RunError::Data(format!("{}: unexpected columns {header:?}", path.display())));
    }
    rd.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}

/// `class,name,iou` rows (empty IoU for absent classes) followed by
/// `miou` and `pixel_acc` summary rows.
pub fn write_report_csv(path: &Path, report: &MetricsReport, names: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["class", "name", "iou"]).map_err(csv_err(path))?;
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let name = names.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("class{c}"));
        let v = iou.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([c.to_string(), name, v]).map_err(csv_err(path))?;
    }
    w.write_record(["", "miou", &report.miou.to_string()]).map_err(csv_err(path))?;
    w.write_record(["", "pixel_acc", &report.pixel_acc.to_string()])
        .map_err(csv_err(path))?;
    w.flush().map_err(RunError::io(path))
}

const BAR_W: u32 = 32;
const GAP: u32 = 12;
const PLOT_H: u32 = 200;
const MARGIN: u32 = 16;

/// Bar plot of per-class IoU on a 0..1 axis with gridlines every 0.25;
/// absent classes get a short gray stub.
pub fn bar_plot(report: &MetricsReport) -> RgbImage {
    let n = report.per_class_iou.len() as u32;
    let width = 2 * MARGIN + n * BAR_W + n.saturating_sub(1) * GAP;
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let base = MARGIN + PLOT_H;
    for q in 0..=4 {
        let y = base - q * PLOT_H / 4;
        for x in MARGIN / 2..width - MARGIN / 2 {
            img.put_pixel(x, y, Rgb(if q == 0 { [0, 0, 0] } else { [210, 210, 210] }));
        }
    }
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let x0 = MARGIN + c as u32 * (BAR_W + GAP);
        let (h, color) = match iou {
            Some(v) => ((v.clamp(0.0, 1.0) * PLOT_H as f64).round() as u32, Rgb([52, 101, 164])),
            None => (3, Rgb([150, 150, 150])),
        };
        for y in base - h..base {
            for x in x0..x0 + BAR_W {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

pub fn write_report_png(path: &Path, report: &MetricsReport) -> Result<()> {
    bar_plot(report)
        .save(path)
        .map_err(|e| RunError::Data(format!("{}: {e}", path.display())))
}

/// Writes `report.csv` and `report.png` into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport, names: &[&str]) -> Result<()> {
    fs::create_dir_all(dir).map_err(RunError::io(dir))?;
    write_report_csv(&dir.join("report.csv"), report, names)?;
    write_report_png(&dir.join("report.png"), report)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(RunError::io(path))?;
    f.write_all(text.as_bytes()).map_err(RunError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rawtask_core::metrics::ConfusionMatrix;

    fn record(epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            l_ohem: 0.1 * epoch as f64,
            l_lovasz: 0.2,
            l_smooth: 0.3,
            l_total: 0.4,
            lr: 2e-3,
            tau_pi: 1.0 / 3.0,
            val_miou: 0.5,
            val_pixel_acc: 0.75,
        }
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let mut log = MetricsLog::create(&p).unwrap();
        for e in 1..=3 {
            log.push(&record(e)).unwrap();
        }
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,l_ohem,l_lovasz,l_smooth,l_total,lr,tau_pi,val_miou,val_pixel_acc\n"));
        let back = read_metrics(&p).unwrap();
        assert_eq!(back, (1..=3).map(record).collect::<Vec<_>>());
    }

    #[test]
    fn report_files() {
        let cm = ConfusionMatrix::from_rows(&[&[1, 1, 0], &[0, 2, 0], &[0, 0, 0]]).unwrap();
        let rep = MetricsReport::from_confusion(cm).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &rep, &["a", "b"]).unwrap();
        let text = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "0,a,0.5");
        assert_eq!(lines[3], "2,class2,");
        assert!(lines[4].starts_with(",miou,0.58333"));
        assert_eq!(lines[5], ",pixel_acc,0.75");
        let img = image::open(dir.path().join("report.png")).unwrap().to_rgb8();
        assert_eq!(img.width(), 2 * MARGIN + 3 * BAR_W + 2 * GAP);
        // bar for IoU 2/3 reaches two thirds of the plot height
        let x = MARGIN + BAR_W + GAP + BAR_W / 2;
        let top = MARGIN + PLOT_H - 133;
        assert_eq!(img.get_pixel(x, top), &Rgb([52, 101, 164]));
        assert_eq!(img.get_pixel(x, top - 2), &Rgb([255, 255, 255]));
    }
}
