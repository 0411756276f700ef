//! Joint training of both branches.
//!
//! Per sample the segmentation loss is back-propagated first, then the
//! reconstruction loss scaled by λ; gradients accumulate across both passes
//! and across the batch before a single clipped AdamW update.

pub mod optim;
pub mod pretrain;
pub mod schedule;

use std::io::Write;

use candle_core::{DType, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, prepare_for_canvas, AugmentConfig, PaddedSample, SampleSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::model::{PmaeModel, ScalePreset};
use crate::nn::{accumulate, global_norm, scale_grads, NamedGrads};
use crate::pmae::ReconLossBreakdown;
use crate::seeds;

pub use optim::{AdamW, AdamWConfig};
pub use pretrain::{mae_loss, toy_mae_pretrain, PretrainConfig, PretrainOutcome};
pub use schedule::{early_stop, lr_schedule, warmup_steps};

/// Searched λ values; 0.01 is the default.
pub const LAMBDA_SWEEP: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// Evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub scale_preset: ScalePreset,
    pub warmup_fraction: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Overrides the run length implied by `epochs`.
    pub max_steps: Option<usize>,
    /// Steps between evaluations; 0 means once per epoch.
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            base_lr: 1e-4,
            epochs: 200,
            batch_size: 1,
            mask_ratio: 0.75,
            early_stop_patience: 10,
            seed: 0,
            scale_preset: ScalePreset::Desk,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            max_steps: None,
            eval_every: 0,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("train.{field}"), msg));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", "must be finite and >= 0");
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr", "must be > 0");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio", "must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must lie in [0, 1)");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad("clip_norm", "must be finite and >= 0");
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("optimizer", "betas must lie in [0, 1), eps > 0, weight_decay >= 0");
        }
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_samples);
        self.max_steps.unwrap_or(full)
    }
}

/// `l_seg + λ·l_rec`, rejecting non-finite terms.
pub fn combined_loss(l_seg: f64, l_rec: f64, lambda: f64) -> Result<f64> {
    for (what, v) in [("l_seg", l_seg), ("l_rec", l_rec), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: what.into(),
                step: 0,
            });
        }
    }
    Ok(l_seg + lambda * l_rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub l_seg: f64,
    pub l_rec: ReconLossBreakdown,
    pub combined: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Batch-averaged gradients plus the loss values that produced them.
pub struct BranchGradients {
    pub grads: NamedGrads,
    pub l_seg: f64,
    pub l_rec: ReconLossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn mean_breakdown(parts: &[ReconLossBreakdown]) -> ReconLossBreakdown {
    let n = parts.len().max(1) as f64;
    let s = |f: fn(&ReconLossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    ReconLossBreakdown::from_parts(s(|b| b.loss_1_2), s(|b| b.loss_2_2), s(|b| b.loss_3_2))
}

/// Two backward passes per sample: segmentation, then reconstruction with
/// the loss pre-scaled by λ. With λ = 0 the reconstruction pass is skipped
/// entirely, so decoder parameters receive no gradient.
pub fn sequential_gradients(
    model: &PmaeModel,
    batch: &[PaddedSample],
    lambda: f64,
    mask_ratio: f64,
    mask_seeds: &[u64],
) -> Result<BranchGradients> {
    check_batch(batch, mask_seeds)?;
    let inv = 1.0 / batch.len() as f64;
    let mut grads = NamedGrads::new();
    let mut l_seg = 0.0;
    let mut recon = Vec::with_capacity(batch.len());
    for (sample, &seed) in batch.iter().zip(mask_seeds) {
        let ls = model.seg_step(sample)?;
        l_seg += scalar(&ls)? * inv;
        accumulate(&mut grads, model.params.collect_grads(&(ls * inv)?.backward()?))?;
        if lambda > 0.0 {
            let lr = model.recon_step(sample, mask_ratio, seed)?;
            if lr.has_graph {
                let g = (&lr.total * (lambda * inv))?.backward()?;
                accumulate(&mut grads, model.params.collect_grads(&g))?;
            }
            recon.push(lr.breakdown);
        }
    }
    Ok(BranchGradients {
        grads,
        l_seg,
        l_rec: mean_breakdown(&recon),
    })
}

/// Gradient of the single scalar `mean(L_seg + λ·L_rec)` in one backward
/// pass. Reference for [`sequential_gradients`].
pub fn joint_gradients(
    model: &PmaeModel,
    batch: &[PaddedSample],
    lambda: f64,
    mask_ratio: f64,
    mask_seeds: &[u64],
) -> Result<NamedGrads> {
    check_batch(batch, mask_seeds)?;
    let mut total: Option<Tensor> = None;
    for (sample, &seed) in batch.iter().zip(mask_seeds) {
        let mut l = model.seg_step(sample)?;
        if lambda > 0.0 {
            let lr = model.recon_step(sample, mask_ratio, seed)?;
            if lr.has_graph {
                l = (l + (lr.total * lambda)?)?;
            }
        }
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    let total = (total.expect("non-empty batch") / batch.len() as f64)?;
    Ok(model.params.collect_grads(&total.backward()?))
}

fn check_batch(batch: &[PaddedSample], seeds: &[u64]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.len() != seeds.len() {
        return Err(Error::Invalid(format!(
            "{} samples but {} masking seeds",
            batch.len(),
            seeds.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub steps: usize,
    pub eval_history: Vec<f64>,
    pub best_f1: Option<f64>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub model: PmaeModel,
    pub cfg: TrainConfig,
    pub optim: AdamW,
    /// Updates applied so far.
    pub step: usize,
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(model: PmaeModel, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::config("train.max_steps", "run has zero steps"));
        }
        Ok(Self {
            model,
            optim: AdamW::new(cfg.optimizer),
            cfg,
            step: 0,
            total_steps,
        })
    }

    pub fn mask_seeds(&self, n: usize) -> Vec<u64> {
        (0..n as u64)
            .map(|i| seeds::derive(self.cfg.seed, seeds::MASKING, self.step as u64, i))
            .collect()
    }

    /// Learning rate of the next update (1-based update index).
    pub fn current_lr(&self) -> f64 {
        let warm = warmup_steps(self.total_steps, self.cfg.warmup_fraction);
        lr_schedule(self.step + 1, self.total_steps, self.cfg.base_lr, warm)
    }

    pub fn train_step(&mut self, batch: &[PaddedSample]) -> Result<StepReport> {
        let step = self.step;
        let nonfinite = |what: &str| Error::NonFinite {
            what: what.into(),
            step,
        };
        let seeds = self.mask_seeds(batch.len());
        let BranchGradients {
            mut grads,
            l_seg,
            l_rec,
        } = sequential_gradients(&self.model, batch, self.cfg.lambda, self.cfg.mask_ratio, &seeds)?;
        if !l_seg.is_finite() {
            return Err(nonfinite("segmentation loss"));
        }
        if !l_rec.total.is_finite() {
            return Err(nonfinite("reconstruction loss"));
        }
        let combined = combined_loss(l_seg, l_rec.total, self.cfg.lambda).map_err(|_| nonfinite("combined loss"))?;
        let grad_norm = global_norm(&grads)?;
        if !grad_norm.is_finite() {
            return Err(nonfinite("gradient norm"));
        }
        if self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm {
            scale_grads(&mut grads, self.cfg.clip_norm / grad_norm)?;
        }
        let lr = self.current_lr();
        self.optim.step(&self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            l_seg,
            l_rec,
            combined,
            lr,
            grad_norm,
        })
    }

    /// Sample indices of update `step`: epoch-wise shuffles seeded by epoch,
    /// cut into consecutive batches (the last one may be short).
    pub fn batch_indices(&self, n_samples: usize, step: usize) -> Vec<usize> {
        let per_epoch = self.cfg.steps_per_epoch(n_samples);
        let (epoch, b) = (step / per_epoch, step % per_epoch);
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.cfg.seed, seeds::DATA_ORDER, epoch as u64, 0));
        order.shuffle(&mut rng);
        let lo = b * self.cfg.batch_size;
        order[lo..(lo + self.cfg.batch_size).min(n_samples)].to_vec()
    }

    /// Loads, augments and pads the batch of the next update.
    pub fn next_batch(&self, source: &dyn SampleSource) -> Result<Vec<PaddedSample>> {
        if source.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let (h, w) = self.model.cfg.canvas();
        self.batch_indices(source.len(), self.step)
            .into_iter()
            .enumerate()
            .map(|(i, idx)| {
                let raw = source.get(idx)?;
                let seed = seeds::derive(self.cfg.seed, seeds::AUGMENT, self.step as u64, i as u64);
                prepare_for_canvas(&augment(&raw, seed, &self.cfg.augment), h, w)
            })
            .collect()
    }

    /// Runs until `total_steps` or early stopping. Step reports go to `log`
    /// as JSON lines; `on_eval` sees every evaluation score and may persist
    /// checkpoints.
    pub fn fit(
        &mut self,
        train: &dyn SampleSource,
        eval: Option<&dyn SampleSource>,
        log: &mut dyn Write,
        on_eval: &mut dyn FnMut(&Trainer, f64, bool) -> Result<()>,
    ) -> Result<FitSummary> {
        let per_epoch = self.cfg.steps_per_epoch(train.len());
        let eval_every = if self.cfg.eval_every == 0 {
            per_epoch
        } else {
            self.cfg.eval_every
        };
        let mut summary = FitSummary::default();
        while self.step < self.total_steps {
            let batch = self.next_batch(train)?;
            let report = self.train_step(&batch)?;
            serde_json::to_writer(&mut *log, &report).map_err(|e| Error::Io(e.into()))?;
            writeln!(log)?;
            debug!(
                "step {} l_seg {:.5} l_rec {:.5} lr {:.3e}",
                report.step, report.l_seg, report.l_rec.total, report.lr
            );
            if let Some(eval) = eval {
                if self.step % eval_every == 0 || self.step == self.total_steps {
                    let res = evaluate(&self.model, eval, &EvalConfig::default())?;
                    let improved = summary.best_f1.is_none_or(|b| res.f1 > b);
                    if improved {
                        summary.best_f1 = Some(res.f1);
                    }
                    summary.eval_history.push(res.f1);
                    info!("step {}: eval F1 {:.4}", self.step, res.f1);
                    on_eval(self, res.f1, improved)?;
                    if self.cfg.early_stop_patience > 0
                        && early_stop(&summary.eval_history, self.cfg.early_stop_patience)
                    {
                        info!("early stop at step {}", self.step);
                        summary.stopped_early = true;
                        break;
                    }
                }
            }
        }
        summary.steps = self.step;
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_loss_cases() {
        assert_eq!(combined_loss(0.3, 12.0, 0.0).unwrap(), 0.3);
        assert!((combined_loss(0.005, 50.0, 0.01).unwrap() - 0.505).abs() < 1e-12);
        assert_eq!(combined_loss(0.3, 0.0, 1.0).unwrap(), 0.3);
        assert!(combined_loss(f64::NAN, 1.0, 0.01).is_err());
        assert!(combined_loss(0.1, f64::INFINITY, 0.01).is_err());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { path, .. }) if path == "train.lambda"));
        let bad = TrainConfig {
            mask_ratio: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn step_counts() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        assert_eq!(cfg.steps_per_epoch(10), 3);
        assert_eq!(cfg.total_steps(10), 9);
        let capped = TrainConfig {
            max_steps: Some(5),
            ..cfg
        };
        assert_eq!(capped.total_steps(10), 5);
    }
}
