//! Edge and patch-edge masks derived from a ground-truth tamper mask.
//!
//! The edge mask is the band `dilate(gt) ∧ ¬erode(gt)` under a square
//! structuring element of side `2r + 1`. The patch edge mask quantizes that
//! band onto the encoder's patch grid (anchored at the canvas origin): a
//! patch is set when any of its pixels is set.

use crate::error::{shape_err, Error, Result};
use crate::grid::BinaryGrid;

/// Default morphology radius at a 1024 px canvas.
pub const FULL_SCALE_RADIUS: usize = 7;

/// Morphology radius scaled to a canvas side, never below 1.
pub fn scaled_radius(canvas: usize) -> usize {
    ((FULL_SCALE_RADIUS * canvas) as f64 / 1024.0).round().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    pub grid: BinaryGrid,
    pub dilation_radius: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchEdgeMask {
    pub grid: BinaryGrid,
    pub patch_size: usize,
}

/// Square max (dilate) or min (erode) filter over in-bounds neighbours.
/// Separable: a horizontal pass followed by a vertical one.
fn square_filter(src: &BinaryGrid, radius: usize, take_max: bool) -> BinaryGrid {
    let (h, w) = src.dims();
    let pick = |a: u8, b: u8| if take_max { a.max(b) } else { a.min(b) };
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            let mut acc = src.data[y * w + lo];
            for xx in lo + 1..=hi {
                acc = pick(acc, src.data[y * w + xx]);
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            let mut acc = rows[lo * w + x];
            for yy in lo + 1..=hi {
                acc = pick(acc, rows[yy * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    BinaryGrid {
        height: h,
        width: w,
        data: out,
    }
}

pub fn dilate(gt: &BinaryGrid, radius: usize) -> BinaryGrid {
    square_filter(gt, radius, true)
}

pub fn erode(gt: &BinaryGrid, radius: usize) -> BinaryGrid {
    square_filter(gt, radius, false)
}

/// Band of width about `2 * radius` straddling the tamper boundary.
pub fn edge_mask(gt: &BinaryGrid, radius: usize) -> Result<EdgeMask> {
    if !gt.is_binary() {
        return Err(Error::Invalid("edge mask requires a binary ground truth".into()));
    }
    if radius == 0 {
        return Err(Error::Invalid("morphology radius must be at least 1".into()));
    }
    if gt.data.is_empty() {
        return Ok(EdgeMask {
            grid: gt.clone(),
            dilation_radius: radius,
        });
    }
    let grown = dilate(gt, radius);
    let shrunk = erode(gt, radius);
    let data = grown
        .data
        .iter()
        .zip(&shrunk.data)
        .map(|(&d, &e)| d & (1 - e))
        .collect();
    Ok(EdgeMask {
        grid: BinaryGrid {
            height: gt.height,
            width: gt.width,
            data,
        },
        dilation_radius: radius,
    })
}

/// Per-block OR of `grid` over `bh × bw` blocks, returned at block resolution.
fn block_any(grid: &BinaryGrid, bh: usize, bw: usize) -> BinaryGrid {
    let (oh, ow) = (grid.height / bh, grid.width / bw);
    let mut out = BinaryGrid::zeros(oh, ow);
    for y in 0..grid.height {
        let row = &grid.data[y * grid.width..(y + 1) * grid.width];
        let oy = y / bh;
        for (x, &v) in row.iter().enumerate() {
            if v != 0 {
                out.data[oy * ow + x / bw] = 1;
            }
        }
    }
    out
}

pub fn patch_edge_mask(edge: &EdgeMask, patch_size: usize) -> Result<PatchEdgeMask> {
    let (h, w) = edge.grid.dims();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(shape_err!("{h}x{w} mask is not divisible into {patch_size}px patches"));
    }
    let blocks = block_any(&edge.grid, patch_size, patch_size);
    let grid = BinaryGrid::from_fn(h, w, |y, x| {
        blocks.data[(y / patch_size) * blocks.width + x / patch_size] != 0
    });
    Ok(PatchEdgeMask { grid, patch_size })
}

/// Footprint-OR reduction of a mask onto a coarser grid whose dims divide
/// the source dims.
pub fn downsample_mask(mask: &BinaryGrid, target: (usize, usize)) -> Result<BinaryGrid> {
    let (h, w) = mask.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(shape_err!("cannot reduce {h}x{w} mask onto {th}x{tw}"));
    }
    Ok(block_any(mask, h / th, w / tw))
}

/// Full chain used by the reconstruction loss: ground truth → edge band →
/// patch-quantized band.
pub fn patch_edge_from_gt(gt: &BinaryGrid, radius: usize, patch_size: usize) -> Result<PatchEdgeMask> {
    patch_edge_mask(&edge_mask(gt, radius)?, patch_size)
}
