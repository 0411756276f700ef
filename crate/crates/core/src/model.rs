//! The full two-branch model: one shared encoder, the segmentation head,
//! the reconstruction decoder and the frozen perceptual stack.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::PaddedSample;
use crate::encoder::{EncoderConfig, VitEncoder};
use crate::error::{shape_err, Error, Result};
use crate::grid::{BinaryGrid, ImageGrid, ScalarGrid};
use crate::masks::{patch_edge_from_gt, scaled_radius, PatchEdgeMask};
use crate::nn::{resize_bilinear, to_vec_f64, ParamStore};
use crate::pmae::{
    masked_perceptual_loss, DecoderConfig, PerceptualConfig, PerceptualStack, ReconDecoder, ReconLoss, Reconstruction,
};
use crate::seg::{seg_loss, PredictionMap, SegConfig, SegHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    /// 32 px canvas used for gradient checks.
    Tiny,
    /// 64 px canvas for multi-seed sweeps on a CPU.
    Compact,
    /// 256 px canvas, the default.
    Desk,
    /// 1024 px canvas with a ViT-B encoder.
    Full,
}

impl ScalePreset {
    pub const ALL: [ScalePreset; 4] = [Self::Tiny, Self::Compact, Self::Desk, Self::Full];

    pub fn model_config(self) -> ModelConfig {
        match self {
            Self::Tiny => ModelConfig::tiny(),
            Self::Compact => ModelConfig::compact(),
            Self::Desk => ModelConfig::desk(),
            Self::Full => ModelConfig::full(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tiny => "tiny",
            Self::Compact => "compact",
            Self::Desk => "desk",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for ScalePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::config(
                "scale_preset",
                format!("unknown preset `{s}` (tiny, compact, desk, full)"),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub seg: SegConfig,
    pub decoder: DecoderConfig,
    pub perceptual: PerceptualConfig,
    /// Morphology radius of the edge band, in pixels.
    pub mask_radius: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            seg: SegConfig::desk(),
            decoder: DecoderConfig::desk(),
            perceptual: PerceptualConfig::desk(),
            mask_radius: scaled_radius(256),
        }
    }

    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::full(),
            seg: SegConfig::full(),
            decoder: DecoderConfig::full(),
            perceptual: PerceptualConfig::full(),
            mask_radius: scaled_radius(1024),
        }
    }

    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            seg: SegConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            perceptual: PerceptualConfig::tiny(),
            mask_radius: 1,
        }
    }

    pub fn compact() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 64,
                depth: 2,
                heads: 2,
                window_size: 4,
                global_every: 2,
                height: 64,
                width: 64,
                mlp_ratio: 4,
            },
            seg: SegConfig {
                pyramid_dim: 32,
                decoder_dim: 32,
            },
            decoder: DecoderConfig {
                dim: 32,
                depth: 1,
                heads: 2,
            },
            perceptual: PerceptualConfig {
                widths: [8, 16, 16],
                ..PerceptualConfig::full()
            },
            mask_radius: 1,
        }
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.encoder.height, self.encoder.width)
    }

    /// Prediction grid: a quarter of the canvas per side.
    pub fn prediction_dims(&self) -> (usize, usize) {
        (self.encoder.height / 4, self.encoder.width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let (gh, gw) = self.encoder.grid();
        if gh % 4 != 0 || gw % 4 != 0 {
            return Err(Error::config(
                "encoder",
                format!("{gh}x{gw} patch grid must be divisible by 4 for the pyramid"),
            ));
        }
        if self.encoder.patch_size % 4 != 0 {
            return Err(Error::config("encoder.patch_size", "must be a multiple of 4"));
        }
        if self.decoder.heads == 0 || self.decoder.dim % self.decoder.heads != 0 || self.decoder.dim % 4 != 0 {
            return Err(Error::config(
                "decoder.dim",
                "must be a multiple of 4 and of the head count",
            ));
        }
        if self.seg.pyramid_dim == 0 || self.seg.decoder_dim == 0 {
            return Err(Error::config("seg", "channel counts must be positive"));
        }
        if self.mask_radius == 0 {
            return Err(Error::config("mask_radius", "must be at least 1"));
        }
        if self.perceptual.widths.contains(&0) {
            return Err(Error::config("perceptual.widths", "must be positive"));
        }
        Ok(())
    }
}

/// `(3, H, W)` tensor view of a channel-first grid.
pub fn image_tensor(image: &ImageGrid, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(image.data.clone(), (3, image.height, image.width), device)?.to_dtype(dtype)?)
}

pub struct PmaeModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: VitEncoder,
    pub seg: SegHead,
    pub recon: ReconDecoder,
    pub perceptual: PerceptualStack,
}

/// Parameter groups by name prefix.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const SEG_PREFIX: &str = "seg.";
pub const RECON_PREFIX: &str = "recon.";

impl PmaeModel {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype, seed);
        let encoder = VitEncoder::new(&mut params, &cfg.encoder)?;
        let seg = SegHead::new(&mut params, cfg.encoder.embed_dim, &cfg.seg)?;
        let recon = ReconDecoder::new(
            &mut params,
            "recon",
            &cfg.decoder,
            cfg.encoder.embed_dim,
            cfg.encoder.patch_size,
            cfg.encoder.grid(),
        )?;
        let perceptual = PerceptualStack::new(&cfg.perceptual)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            seg,
            recon,
            perceptual,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn image_tensor(&self, image: &ImageGrid) -> Result<Tensor> {
        if image.dims() != self.cfg.canvas() {
            return Err(shape_err!(
                "image {:?} does not match canvas {:?}",
                image.dims(),
                self.cfg.canvas()
            ));
        }
        image_tensor(image, self.dtype(), self.device())
    }

    /// Full encode followed by the segmentation head.
    pub fn segment(&self, image: &Tensor) -> Result<PredictionMap> {
        let g = self.encoder.forward(image)?;
        let fp = self.seg.feature_pyramid(&g)?;
        self.seg.mlp_decode(&fp, self.cfg.prediction_dims())
    }

    pub fn seg_step(&self, sample: &PaddedSample) -> Result<Tensor> {
        let p = self.segment(&self.image_tensor(&sample.image)?)?;
        seg_loss(&p, &sample.mask)
    }

    pub fn patch_edge_mask(&self, gt: &BinaryGrid) -> Result<PatchEdgeMask> {
        patch_edge_from_gt(gt, self.cfg.mask_radius, self.cfg.encoder.patch_size)
    }

    pub fn reconstruct(&self, image: &Tensor, ratio: f64, seed: u64) -> Result<Reconstruction> {
        let (kept, plan) = self.encoder.encode_masked(image, ratio, seed)?;
        self.recon.decode(&kept, &plan)
    }

    /// Masked encode → decode → edge band → patch edge mask → masked
    /// perceptual loss against the unmasked padded image.
    pub fn recon_step(&self, sample: &PaddedSample, ratio: f64, seed: u64) -> Result<ReconLoss> {
        let x = self.image_tensor(&sample.image)?;
        let pm = self.patch_edge_mask(&sample.mask)?;
        let r = self.reconstruct(&x, ratio, seed)?;
        masked_perceptual_loss(&self.perceptual, &r, &x, &pm)
    }

    /// Tamper probabilities at full canvas resolution, cropped to `extent`.
    pub fn predict_probability(&self, padded: &ImageGrid, extent: (usize, usize)) -> Result<ScalarGrid> {
        let (h, w) = self.cfg.canvas();
        if extent.0 > h || extent.1 > w {
            return Err(shape_err!("extent {extent:?} exceeds canvas {h}x{w}"));
        }
        let p = self.segment(&self.image_tensor(padded)?)?.probabilities()?;
        let up = resize_bilinear(&p.unsqueeze(0)?, h, w)?.squeeze(0)?;
        let v: Vec<f32> = to_vec_f64(&up)?.into_iter().map(|x| x as f32).collect();
        Ok(ScalarGrid::new(h, w, v)?.crop(extent.0, extent.1))
    }
}
