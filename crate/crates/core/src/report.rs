//! Rendered tables, JSON-lines records and a bar plot for sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{EvalResult, RobustnessRow};

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::file(path, e))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
}

pub fn eval_table(results: &[EvalResult]) -> String {
    let mut s = format!("{:<24} {:>8} {:>8} {:>8}\n", "dataset", "F1", "AUC", "images");
    for r in results {
        s += &format!(
            "{:<24} {:>8.4} {:>8} {:>8}\n",
            r.dataset,
            r.f1,
            fmt_auc(r.auc),
            r.n_images
        );
    }
    s
}

pub fn robustness_table(rows: &[RobustnessRow]) -> String {
    let mut s = format!("{:<24} {:>8} {:>8}\n", "distortion", "F1", "AUC");
    for r in rows {
        s += &format!("{:<24} {:>8.4} {:>8}\n", r.label, r.f1, fmt_auc(r.auc));
    }
    s
}

/// One bar per row, height proportional to F1; the baseline bar is grey,
/// JPEG rows blue, blur rows orange.
pub fn robustness_plot(rows: &[RobustnessRow], path: &Path) -> Result<()> {
    const BAR: u32 = 24;
    const GAP: u32 = 8;
    const HEIGHT: u32 = 200;
    let width = GAP + rows.len() as u32 * (BAR + GAP);
    let mut img = RgbImage::from_pixel(width.max(1), HEIGHT + 2 * GAP, Rgb([255, 255, 255]));
    for (i, r) in rows.iter().enumerate() {
        let color = match r.distortion.kind() {
            "jpeg" => Rgb([52, 101, 164]),
            "gaussian_blur" => Rgb([245, 121, 0]),
            _ => Rgb([136, 138, 133]),
        };
        let h = (r.f1.clamp(0.0, 1.0) * HEIGHT as f64).round() as u32;
        let x0 = GAP + i as u32 * (BAR + GAP);
        for x in x0..x0 + BAR {
            for y in (GAP + HEIGHT - h)..(GAP + HEIGHT) {
                img.put_pixel(x, y, color);
            }
        }
    }
    for x in 0..img.width() {
        img.put_pixel(x, GAP + HEIGHT, Rgb([0, 0, 0]));
    }
    img.save(path).map_err(|e| Error::file(path, e))
}
