//! Pixel-level scoring and the distortion robustness sweep.
//!
//! Scores are computed per image at full resolution inside the original
//! extent (padding excluded) and averaged with equal weight per image.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{apply_distortion, crop_to_extent, prepare_for_canvas, DistortionSpec, RawSample, SampleSource};
use crate::error::{shape_err, Result};
use crate::grid::{BinaryGrid, ScalarGrid};
use crate::model::PmaeModel;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `2TP / (2TP + FP + FN)` with `gt` as the reference. Both empty gives 1,
/// exactly one empty gives 0.
pub fn pixel_f1(pred: &ScalarGrid, gt: &BinaryGrid, threshold: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(shape_err!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        ));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p as f64 >= threshold, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let pred_empty = tp + fp == 0;
    let gt_empty = tp + fnn == 0;
    Ok(match (pred_empty, gt_empty) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64,
    })
}

/// ROC AUC via the Mann-Whitney rank statistic, ties given their average
/// rank. `None` when the ground truth holds a single class.
pub fn pixel_auc(pred: &ScalarGrid, gt: &BinaryGrid) -> Result<Option<f64>> {
    if pred.dims() != gt.dims() {
        return Err(shape_err!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        ));
    }
    let n_pos = gt.count_ones();
    let n_neg = gt.data.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..pred.data.len()).collect();
    order.sort_by(|&a, &b| pred.data[a].total_cmp(&pred.data[b]));
    let mut pos_rank_sum = 0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred.data[order[j + 1]] == pred.data[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if gt.data[k] == 1 {
                pos_rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub dataset: String,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: "eval".into(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub index: usize,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub f1: f64,
    /// Mean over images holding both classes; `None` if there are none.
    pub auc: Option<f64>,
    pub n_images: usize,
    pub n_auc_images: usize,
    pub threshold: f64,
}

/// Prediction inside the original extent, plus the matching ground truth.
pub fn predict_sample(model: &PmaeModel, raw: &RawSample) -> Result<(ScalarGrid, BinaryGrid)> {
    let (h, w) = model.cfg.canvas();
    let padded = prepare_for_canvas(raw, h, w)?;
    let prob = model.predict_probability(&padded.image, padded.orig_extent)?;
    Ok((prob, crop_to_extent(&padded).mask))
}

pub fn score_sample(model: &PmaeModel, raw: &RawSample, index: usize, threshold: f64) -> Result<ImageScore> {
    let (prob, gt) = predict_sample(model, raw)?;
    let auc = pixel_auc(&prob, &gt)?;
    if auc.is_none() {
        warn!("image {index}: single-class ground truth, AUC skipped");
    }
    Ok(ImageScore {
        index,
        f1: pixel_f1(&prob, &gt, threshold)?,
        auc,
    })
}

/// Equal-weight mean over images, summed in index order so any split of
/// the work aggregates to the same value.
pub fn aggregate(dataset: &str, threshold: f64, scores: &[ImageScore]) -> EvalResult {
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|s| s.index);
    let n = sorted.len();
    let f1 = if n == 0 {
        0.0
    } else {
        sorted.iter().map(|s| s.f1).sum::<f64>() / n as f64
    };
    let aucs: Vec<f64> = sorted.iter().filter_map(|s| s.auc).collect();
    let auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    EvalResult {
        dataset: dataset.to_string(),
        f1,
        auc,
        n_images: n,
        n_auc_images: aucs.len(),
        threshold,
    }
}

/// Segmentation branch only: pad, predict, upsample, crop, score, average.
pub fn evaluate(model: &PmaeModel, source: &dyn SampleSource, cfg: &EvalConfig) -> Result<EvalResult> {
    evaluate_distorted(model, source, cfg, &DistortionSpec::None)
}

/// Same as [`evaluate`], processing the manifest in chunks of `batch`.
pub fn evaluate_batched(
    model: &PmaeModel,
    source: &dyn SampleSource,
    cfg: &EvalConfig,
    batch: usize,
) -> Result<EvalResult> {
    let batch = batch.max(1);
    let mut scores = Vec::with_capacity(source.len());
    for lo in (0..source.len()).step_by(batch) {
        for i in lo..(lo + batch).min(source.len()) {
            scores.push(score_sample(model, &source.get(i)?, i, cfg.threshold)?);
        }
    }
    Ok(aggregate(&cfg.dataset, cfg.threshold, &scores))
}

fn evaluate_distorted(
    model: &PmaeModel,
    source: &dyn SampleSource,
    cfg: &EvalConfig,
    spec: &DistortionSpec,
) -> Result<EvalResult> {
    let mut scores = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let raw = apply_distortion(&source.get(i)?, spec)?;
        scores.push(score_sample(model, &raw, i, cfg.threshold)?);
    }
    Ok(aggregate(&cfg.dataset, cfg.threshold, &scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub distortion: DistortionSpec,
    pub label: String,
    pub f1: f64,
    pub auc: Option<f64>,
}

/// Evaluates under each distortion, applied to the raw image before
/// padding. A `none` baseline row is always first.
pub fn robustness_sweep(
    model: &PmaeModel,
    source: &dyn SampleSource,
    specs: &[DistortionSpec],
    cfg: &EvalConfig,
) -> Result<Vec<RobustnessRow>> {
    let mut all = vec![DistortionSpec::None];
    all.extend(specs.iter().filter(|s| **s != DistortionSpec::None).cloned());
    all.into_iter()
        .map(|spec| {
            spec.validate()?;
            let r = evaluate_distorted(model, source, cfg, &spec)?;
            Ok(RobustnessRow {
                label: spec.label(),
                distortion: spec,
                f1: r.f1,
                auc: r.auc,
            })
        })
        .collect()
}
