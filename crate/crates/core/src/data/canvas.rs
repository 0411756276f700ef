//! Zero-padding onto the working canvas, and the pre-resize applied to
//! images that do not fit.

use super::{PaddedSample, RawSample};
use crate::error::{shape_err, Result};
use crate::grid::{BinaryGrid, ImageGrid};

/// Copies the sample into the top-left corner of an `h × w` zero canvas.
pub fn pad_to_canvas(sample: &RawSample, height: usize, width: usize) -> Result<PaddedSample> {
    let (h, w) = sample.dims();
    if h > height || w > width {
        return Err(shape_err!("{h}x{w} sample does not fit a {height}x{width} canvas"));
    }
    let mut image = ImageGrid::zeros(height, width);
    for c in 0..ImageGrid::CHANNELS {
        let src = sample.image.plane(c);
        let dst = image.plane_mut(c);
        for y in 0..h {
            dst[y * width..y * width + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    let mut mask = BinaryGrid::zeros(height, width);
    for y in 0..h {
        mask.data[y * width..y * width + w].copy_from_slice(&sample.mask.data[y * w..(y + 1) * w]);
    }
    Ok(PaddedSample {
        image,
        mask,
        orig_extent: (h, w),
    })
}

pub fn crop_to_extent(padded: &PaddedSample) -> RawSample {
    let (h, w) = padded.orig_extent;
    let width = padded.image.width;
    let mut image = ImageGrid::zeros(h, w);
    for c in 0..ImageGrid::CHANNELS {
        let src = padded.image.plane(c);
        let dst = image.plane_mut(c);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[y * width..y * width + w]);
        }
    }
    let mut mask = BinaryGrid::zeros(h, w);
    for y in 0..h {
        mask.data[y * w..(y + 1) * w].copy_from_slice(&padded.mask.data[y * width..y * width + w]);
    }
    RawSample { image, mask }
}

/// Target dims when the longer side is brought down to `limit`.
pub fn resized_dims(h: usize, w: usize, limit: usize) -> (usize, usize) {
    if h.max(w) <= limit {
        return (h, w);
    }
    let scale = limit as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, limit);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, limit);
    (nh, nw)
}

/// Shrinks the sample so its longer side equals `limit`, keeping aspect
/// ratio. Samples that already fit pass through unchanged.
pub fn resize_oversized(sample: &RawSample, limit: usize) -> RawSample {
    let (h, w) = sample.dims();
    let (nh, nw) = resized_dims(h, w, limit);
    if (nh, nw) == (h, w) {
        return sample.clone();
    }
    RawSample {
        image: resize_image_bilinear(&sample.image, nh, nw),
        mask: resize_mask_nearest(&sample.mask, nh, nw),
    }
}

/// Resize if needed, then pad: the standard route from a loaded sample to
/// encoder input.
pub fn prepare_for_canvas(sample: &RawSample, height: usize, width: usize) -> Result<PaddedSample> {
    let limit = height.min(width);
    pad_to_canvas(&resize_oversized(sample, limit), height, width)
}

/// Half-pixel-centre bilinear resampling of one plane.
pub fn resize_plane_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, nh);
    let tx = taps(w, nw);
    let mut out = vec![0f32; nh * nw];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let a = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let b = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * nw + ox] = a * (1.0 - fy) + b * fy;
        }
    }
    out
}

pub fn resize_image_bilinear(image: &ImageGrid, nh: usize, nw: usize) -> ImageGrid {
    let mut data = Vec::with_capacity(ImageGrid::CHANNELS * nh * nw);
    for c in 0..ImageGrid::CHANNELS {
        data.extend(resize_plane_bilinear(image.plane(c), image.height, image.width, nh, nw));
    }
    ImageGrid {
        height: nh,
        width: nw,
        data,
    }
}

/// Nearest-neighbour sampling followed by the 0.5 re-binarization.
pub fn resize_mask_nearest(mask: &BinaryGrid, nh: usize, nw: usize) -> BinaryGrid {
    let (h, w) = mask.dims();
    let mut vals = Vec::with_capacity(nh * nw);
    for oy in 0..nh {
        let y = (((oy as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        for ox in 0..nw {
            let x = (((ox as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
            vals.push(mask.get(y, x) as f32);
        }
    }
    BinaryGrid::from_threshold(nh, nw, &vals, 0.5)
}
