//! PNG/JPEG reading and writing for images, masks and probability maps.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, ImageGrid, ScalarGrid};

/// Mask pixels at or above this 8-bit value count as tampered.
pub const MASK_THRESHOLD: u8 = 128;

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::file(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::file(path, e))?
        .decode()
        .map_err(|e| Error::file(path, e))
}

pub fn rgb_to_grid(img: &RgbImage) -> ImageGrid {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut grid = ImageGrid::zeros(h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            grid.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    grid
}

pub fn grid_to_rgb(grid: &ImageGrid) -> RgbImage {
    RgbImage::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        let px = |c| (grid.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_image(path: &Path) -> Result<ImageGrid> {
    Ok(rgb_to_grid(&open(path)?.to_rgb8()))
}

pub fn load_mask(path: &Path) -> Result<BinaryGrid> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| u8::from(p[0] >= MASK_THRESHOLD)).collect();
    Ok(BinaryGrid {
        height: h,
        width: w,
        data,
    })
}

pub fn save_image(grid: &ImageGrid, path: &Path) -> Result<()> {
    grid_to_rgb(grid).save(path).map_err(|e| Error::file(path, e))
}

/// Writes 0 / 255.
pub fn save_mask(mask: &BinaryGrid, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    });
    img.save(path).map_err(|e| Error::file(path, e))
}

/// Writes a `[0, 1]` map as 8-bit grey.
pub fn save_probability(map: &ScalarGrid, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Luma([(map.get(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::file(path, e))
}

/// Red tint over pixels whose probability exceeds `threshold`.
pub fn save_overlay(image: &ImageGrid, map: &ScalarGrid, threshold: f32, path: &Path) -> Result<()> {
    let mut rgb = grid_to_rgb(image);
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        if map.get(y as usize, x as usize) > threshold {
            px[0] = ((px[0] as u16 + 255) / 2) as u8;
            px[1] /= 2;
            px[2] /= 2;
        }
    }
    rgb.save(path).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_thresholds_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let img = GrayImage::from_fn(4, 1, |x, _| Luma([[0u8, 127, 128, 255][x as usize]]));
        img.save(&path).unwrap();
        let m = load_mask(&path).unwrap();
        assert_eq!(m.data, vec![0, 0, 1, 1]);
    }

    #[test]
    fn image_png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let mut g = ImageGrid::zeros(3, 5);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = (i * 17 % 256) as f32 / 255.0;
        }
        save_image(&g, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), g);
    }
}
