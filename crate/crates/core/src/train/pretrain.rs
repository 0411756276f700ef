//! Small-corpus MAE pre-training of the encoder with a throwaway decoder.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{prepare_for_canvas, RawSample};
use crate::encoder::{patchify, EncoderConfig, VitEncoder};
use crate::error::{shape_err, Error, Result};
use crate::grid::ImageGrid;
use crate::model::image_tensor;
use crate::nn::{global_norm, scale_grads, ParamStore};
use crate::pmae::{DecoderConfig, ReconDecoder};
use crate::seeds;
use crate::train::{lr_schedule, warmup_steps, AdamW, AdamWConfig};

/// Parameter prefix of the throwaway decoder.
pub const MAE_DECODER_PREFIX: &str = "mae_decoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub base_lr: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub decoder: DecoderConfig,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            base_lr: 1e-3,
            mask_ratio: 0.75,
            seed: 0,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            decoder: DecoderConfig::desk(),
            optimizer: AdamWConfig::default(),
        }
    }
}

pub struct PretrainOutcome {
    pub params: ParamStore,
    pub encoder: VitEncoder,
    pub decoder: ReconDecoder,
    /// Masked-patch MSE per step.
    pub losses: Vec<f64>,
}

/// Pixel MSE over the masked patches only; visible patches do not enter.
pub fn mae_loss(pred: &Tensor, target: &Tensor, masked: &[usize]) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    if masked.is_empty() {
        return Err(Error::Invalid("no masked patches".into()));
    }
    let idx: Vec<u32> = masked.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, masked.len(), pred.device())?;
    let diff = (pred.index_select(&idx, 0)? - target.index_select(&idx, 0)?)?;
    Ok(diff.sqr()?.mean_all()?)
}

/// One image per step, chosen by a seeded stream; images larger than the
/// canvas are resized, smaller ones padded.
pub fn toy_mae_pretrain(
    corpus: &[ImageGrid],
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Data("pre-training corpus is empty".into()));
    }
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(Error::config("pretrain.mask_ratio", "must lie in (0, 1)"));
    }
    let mut params = ParamStore::new(DType::F32, seeds::derive(cfg.seed, seeds::INIT, 0, 0));
    let encoder = VitEncoder::new(&mut params, enc_cfg)?;
    let decoder = ReconDecoder::new(
        &mut params,
        MAE_DECODER_PREFIX,
        &cfg.decoder,
        enc_cfg.embed_dim,
        enc_cfg.patch_size,
        enc_cfg.grid(),
    )?;
    let images = corpus
        .iter()
        .map(|im| {
            let padded = prepare_for_canvas(&RawSample::authentic(im.clone()), enc_cfg.height, enc_cfg.width)?;
            image_tensor(&padded.image, DType::F32, params.device())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut optim = AdamW::new(cfg.optimizer);
    let warm = warmup_steps(cfg.steps, cfg.warmup_fraction);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pick = seeds::derive(cfg.seed, seeds::DATA_ORDER, step as u64, 0) % images.len() as u64;
        let x = &images[pick as usize];
        let mseed = seeds::derive(cfg.seed, seeds::MASKING, step as u64, 0);
        let (kept, plan) = encoder.encode_masked(x, cfg.mask_ratio, mseed)?;
        let pred = decoder.decode_patches(&kept, &plan)?;
        let loss = mae_loss(&pred, &patchify(x, enc_cfg.patch_size)?, &plan.masked)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "pre-training loss".into(),
                step,
            });
        }
        let mut grads = params.collect_grads(&loss.backward()?);
        let norm = global_norm(&grads)?;
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            scale_grads(&mut grads, cfg.clip_norm / norm)?;
        }
        optim.step(&params, &grads, lr_schedule(step + 1, cfg.steps, cfg.base_lr, warm))?;
        losses.push(value);
    }
    Ok(PretrainOutcome {
        params,
        encoder,
        decoder,
        losses,
    })
}
