//! Segmentation branch: a simple feature pyramid built from the single
//! encoder output, then an all-MLP decoder predicting tamper logits at a
//! quarter of the canvas resolution.
//!
//! Feature maps are kept channel-last, `(h, w, c)`, so every projection is a
//! plain matrix product. The ×2 deconvolution and the strided convolutions
//! use kernel size equal to stride, which makes them per-patch linear maps
//! plus a pixel (un)shuffle.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenGrid;
use crate::error::{shape_err, Result};
use crate::grid::BinaryGrid;
use crate::masks::downsample_mask;
use crate::nn::{bce_with_logits, resize_bilinear, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    /// Pyramid channels.
    pub pyramid_dim: usize,
    /// Decoder channels per level.
    pub decoder_dim: usize,
}

impl SegConfig {
    pub fn desk() -> Self {
        Self {
            pyramid_dim: 64,
            decoder_dim: 64,
        }
    }

    pub fn full() -> Self {
        Self {
            pyramid_dim: 256,
            decoder_dim: 256,
        }
    }

    pub fn tiny() -> Self {
        Self {
            pyramid_dim: 8,
            decoder_dim: 8,
        }
    }
}

/// Four maps, finest first. Level `i` (1-based) is `grid · 2^(2−i)` per side,
/// i.e. `H / 2^(i+2)` with 16 px patches.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|t| t.dims3().expect("levels are rank 3"))
            .collect()
    }
}

/// Tamper logits at `(H/4, W/4)`.
#[derive(Debug, Clone)]
pub struct PredictionMap {
    pub logits: Tensor,
    pub decoder_dim: usize,
}

impl PredictionMap {
    pub fn probabilities(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits)?)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (h, w) = self.logits.dims2().expect("logits are rank 2");
        (h, w, 1)
    }
}

/// `(h, w, c)` → `(h/2, w/2, 4c)`, the 2×2 neighbourhood ordered (dy, dx, c).
fn unshuffle2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("cannot halve a {h}x{w} map"));
    }
    Ok(x.reshape((h / 2, 2, w / 2, 2, c))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape((h / 2, w / 2, 4 * c))?)
}

/// Inverse of [`unshuffle2`].
fn shuffle2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c4) = x.dims3()?;
    let c = c4 / 4;
    Ok(x.reshape((h, w, 2, 2, c))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape((2 * h, 2 * w, c))?)
}

pub struct SegHead {
    pub cfg: SegConfig,
    /// ×2 transposed convolution, kernel 2 stride 2.
    pub up: Linear,
    /// 1×1 convolution at the encoder scale.
    pub same: Linear,
    /// Kernel-2 stride-2 convolution.
    pub down2: Linear,
    /// Two kernel-2 stride-2 convolutions.
    pub down4: [Linear; 2],
    pub level_norms: [LayerNorm; 4],
    /// `W_i, b_i` unifying each level to the decoder width.
    pub level_proj: [Linear; 4],
    pub fuse: Linear,
    pub predict: Linear,
}

impl SegHead {
    pub fn new(ps: &mut ParamStore, embed_dim: usize, cfg: &SegConfig) -> Result<Self> {
        let (d, cs, cd) = (embed_dim, cfg.pyramid_dim, cfg.decoder_dim);
        let norm = |ps: &mut ParamStore, i: usize| LayerNorm::new(ps, &format!("seg.pyramid.norm{i}"), cs);
        let proj = |ps: &mut ParamStore, i: usize| Linear::new(ps, &format!("seg.decoder.linear{i}"), cs, cd);
        Ok(Self {
            cfg: cfg.clone(),
            up: Linear::new(ps, "seg.pyramid.up", d, 4 * cs)?,
            same: Linear::new(ps, "seg.pyramid.same", d, cs)?,
            down2: Linear::new(ps, "seg.pyramid.down2", 4 * d, cs)?,
            down4: [
                Linear::new(ps, "seg.pyramid.down4a", 4 * d, cs)?,
                Linear::new(ps, "seg.pyramid.down4b", 4 * cs, cs)?,
            ],
            level_norms: [norm(ps, 1)?, norm(ps, 2)?, norm(ps, 3)?, norm(ps, 4)?],
            level_proj: [proj(ps, 1)?, proj(ps, 2)?, proj(ps, 3)?, proj(ps, 4)?],
            fuse: Linear::new(ps, "seg.decoder.fuse", 4 * cd, cd)?,
            predict: Linear::new(ps, "seg.decoder.predict", cd, 1)?,
        })
    }

    pub fn feature_pyramid(&self, g: &TokenGrid) -> Result<FeaturePyramid> {
        if !g.is_full() {
            return Err(shape_err!(
                "feature pyramid needs a full encoding ({} tokens for a {:?} grid)",
                g.len(),
                g.grid
            ));
        }
        let (gh, gw) = g.grid;
        let d = g.tokens.dim(1)?;
        let x = g.tokens.reshape((gh, gw, d))?;
        let f1 = shuffle2(&self.up.forward(&x)?)?;
        let f2 = self.same.forward(&x)?;
        let f3 = self.down2.forward(&unshuffle2(&x)?)?;
        let f4 = self.down4[0].forward(&unshuffle2(&x)?)?.gelu_erf()?;
        let f4 = self.down4[1].forward(&unshuffle2(&f4)?)?;
        let [n1, n2, n3, n4] = &self.level_norms;
        Ok(FeaturePyramid {
            levels: [n1.forward(&f1)?, n2.forward(&f2)?, n3.forward(&f3)?, n4.forward(&f4)?],
        })
    }

    /// Per-level linear → bilinear upsample to `out` → concatenate in level
    /// order → two-layer MLP → one logit per position.
    pub fn mlp_decode(&self, fp: &FeaturePyramid, out: (usize, usize)) -> Result<PredictionMap> {
        let mut upsampled = Vec::with_capacity(4);
        for (level, proj) in fp.levels.iter().zip(&self.level_proj) {
            let y = proj.forward(level)?.permute((2, 0, 1))?.contiguous()?;
            upsampled.push(resize_bilinear(&y, out.0, out.1)?);
        }
        let cat = Tensor::cat(&upsampled, 0)?.permute((1, 2, 0))?.contiguous()?;
        let fused = self.fuse.forward(&cat)?.gelu_erf()?;
        let logits = self.predict.forward(&fused)?.squeeze(2)?;
        Ok(PredictionMap {
            logits,
            decoder_dim: self.cfg.decoder_dim,
        })
    }
}

/// Ground truth reduced to the prediction grid: a cell is tampered if any
/// pixel in its footprint is.
pub fn seg_target(mask: &BinaryGrid, out: (usize, usize)) -> Result<BinaryGrid> {
    downsample_mask(mask, out)
}

/// Mean BCE between the logits and the max-pooled ground truth.
pub fn seg_loss(p: &PredictionMap, mask: &BinaryGrid) -> Result<Tensor> {
    let (h, w) = p.logits.dims2()?;
    let target = seg_target(mask, (h, w))?;
    let t = Tensor::from_vec(target.to_f32(), (h, w), p.logits.device())?.to_dtype(p.logits.dtype())?;
    bce_with_logits(&p.logits, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, VitEncoder};
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device};

    fn head(cfg: &EncoderConfig) -> (VitEncoder, SegHead) {
        let mut ps = ParamStore::new(DType::F64, 7);
        let enc = VitEncoder::new(&mut ps, cfg).unwrap();
        let seg = SegHead::new(&mut ps, cfg.embed_dim, &SegConfig::tiny()).unwrap();
        (enc, seg)
    }

    #[test]
    fn zero_pyramid_gives_constant_logits() {
        let cfg = EncoderConfig::tiny();
        let (_, seg) = head(&cfg);
        let z = |s: usize| Tensor::zeros((s, s, 8), DType::F64, &Device::Cpu).unwrap();
        let fp = FeaturePyramid {
            levels: [z(16), z(8), z(4), z(2)],
        };
        let p = seg.mlp_decode(&fp, (8, 8)).unwrap();
        assert_eq!(p.dims(), (8, 8, 1));
        let v = to_vec_f64(&p.logits).unwrap();
        assert!(v.iter().all(|&x| (x - v[0]).abs() < 1e-12));
    }

    #[test]
    fn masked_grid_rejected() {
        let cfg = EncoderConfig::tiny();
        let (enc, seg) = head(&cfg);
        let img = Tensor::zeros((3, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let (masked, _) = enc.encode_masked(&img, 0.5, 0).unwrap();
        assert!(seg.feature_pyramid(&masked).is_err());
    }

    #[test]
    fn decode_is_reproducible() {
        let cfg = EncoderConfig::tiny();
        let (enc, seg) = head(&cfg);
        let img = Tensor::rand(0f64, 1.0, (3, 32, 32), &Device::Cpu).unwrap();
        let fp = seg.feature_pyramid(&enc.forward(&img).unwrap()).unwrap();
        let a = to_vec_f64(&seg.mlp_decode(&fp, (8, 8)).unwrap().logits).unwrap();
        let b = to_vec_f64(&seg.mlp_decode(&fp, (8, 8)).unwrap().logits).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bce_cases() {
        let dev = Device::Cpu;
        let mut mask = BinaryGrid::zeros(16, 16);
        for y in 0..8 {
            for x in 0..4 {
                mask.set(y, x, true);
            }
        }
        // prediction grid 4x4; target cell = any() over 4x4 footprint
        let target = seg_target(&mask, (4, 4)).unwrap();
        assert_eq!(target.count_ones(), 2);
        let logits: Vec<f64> = target.data.iter().map(|&t| if t == 1 { 40.0 } else { -40.0 }).collect();
        let p = PredictionMap {
            logits: Tensor::from_vec(logits, (4, 4), &dev).unwrap(),
            decoder_dim: 1,
        };
        assert!(seg_loss(&p, &mask).unwrap().to_scalar::<f64>().unwrap() < 1e-6);
        let half = PredictionMap {
            logits: Tensor::zeros((4, 4), DType::F64, &dev).unwrap(),
            decoder_dim: 1,
        };
        let l = seg_loss(&half, &mask).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn random_bce_matches_scalar_formula() {
        let dev = Device::Cpu;
        let logits: Vec<f64> = (0..16).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
        let mask = BinaryGrid::from_fn(4, 4, |y, x| (y * 3 + x) % 5 < 2);
        let p = PredictionMap {
            logits: Tensor::from_vec(logits.clone(), (4, 4), &dev).unwrap(),
            decoder_dim: 1,
        };
        let got = seg_loss(&p, &mask).unwrap().to_scalar::<f64>().unwrap();
        let want: f64 = logits
            .iter()
            .zip(&mask.data)
            .map(|(&z, &t)| {
                let prob = 1.0 / (1.0 + (-z).exp());
                -(t as f64 * prob.ln() + (1.0 - t as f64) * (1.0 - prob).ln())
            })
            .sum::<f64>()
            / 16.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
