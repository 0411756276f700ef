//! Checkpoint container: a safetensors file holding named tensors, with a
//! JSON record (format tag, version, kind, step, configs) in its metadata.
//!
//! Tensor names:
//! * model parameters under their parameter names (`encoder.*`, `seg.*`,
//!   `recon.*`, `mae_decoder.*`)
//! * `encoder.pos_embed` for the encoder's positional table
//! * `optim.m.<param>` / `optim.v.<param>` for optimizer moments

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{shape_err, Error, Result};
use crate::model::{ModelConfig, PmaeModel};
use crate::nn::resize_bilinear;
use crate::train::optim::Moments;
use crate::train::{PretrainOutcome, TrainConfig, Trainer};

pub const FORMAT: &str = "pmae-checkpoint";
pub const VERSION: u32 = 1;
pub const POS_EMBED: &str = "encoder.pos_embed";
const META_KEY: &str = "pmae";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Model parameters only.
    Model,
    /// Parameters plus optimizer state, resumable.
    Training,
    /// Encoder and throwaway decoder from MAE pre-training.
    Pretrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub step: usize,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub total_steps: Option<usize>,
    /// Per-parameter optimizer step counts.
    #[serde(default)]
    pub optim_steps: BTreeMap<String, u64>,
}

impl CheckpointMeta {
    fn new(kind: CheckpointKind, step: usize, encoder: EncoderConfig) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            step,
            encoder,
            model: None,
            train: None,
            total_steps: None,
            optim_steps: BTreeMap::new(),
        }
    }
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info: HashMap<String, String> = [
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), VERSION.to_string()),
            (META_KEY.to_string(), meta),
        ]
        .into();
        let contiguous = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(contiguous, Some(info), path).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&buf).map_err(|e| Error::file(path, e))?;
        let info = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata record", path.display())))?;
        if info.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("{}: not a {FORMAT} file", path.display())));
        }
        let version: u32 = info.get("version").and_then(|v| v.parse().ok()).unwrap_or(0);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let meta: CheckpointMeta = serde_json::from_str(
            info.get(META_KEY)
                .ok_or_else(|| Error::Checkpoint("missing config record".into()))?,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { meta, tensors })
    }

    fn params_of(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("optim.") && k.as_str() != POS_EMBED)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

fn model_tensors(model: &PmaeModel) -> Result<BTreeMap<String, Tensor>> {
    let mut t = model.params.tensors()?;
    t.insert(POS_EMBED.into(), model.encoder.pos_embed.copy()?);
    Ok(t)
}

pub fn model_checkpoint(model: &PmaeModel, step: usize) -> Result<Checkpoint> {
    let mut meta = CheckpointMeta::new(CheckpointKind::Model, step, model.cfg.encoder.clone());
    meta.model = Some(model.cfg.clone());
    Ok(Checkpoint {
        meta,
        tensors: model_tensors(model)?,
    })
}

pub fn training_checkpoint(trainer: &Trainer) -> Result<Checkpoint> {
    let model = &trainer.model;
    let mut meta = CheckpointMeta::new(CheckpointKind::Training, trainer.step, model.cfg.encoder.clone());
    meta.model = Some(model.cfg.clone());
    meta.train = Some(trainer.cfg.clone());
    meta.total_steps = Some(trainer.total_steps);
    let mut tensors = model_tensors(model)?;
    for (name, st) in &trainer.optim.state {
        tensors.insert(format!("optim.m.{name}"), st.m.copy()?);
        tensors.insert(format!("optim.v.{name}"), st.v.copy()?);
        meta.optim_steps.insert(name.clone(), st.t);
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn pretrain_checkpoint(outcome: &PretrainOutcome, steps: usize) -> Result<Checkpoint> {
    let meta = CheckpointMeta::new(CheckpointKind::Pretrain, steps, outcome.encoder.cfg.clone());
    let mut tensors = outcome.params.tensors()?;
    tensors.insert(POS_EMBED.into(), outcome.encoder.pos_embed.copy()?);
    Ok(Checkpoint { meta, tensors })
}

/// Rebuilds a model from a model or training checkpoint.
pub fn restore_model(ckpt: &Checkpoint, dtype: DType) -> Result<PmaeModel> {
    let cfg = ckpt
        .meta
        .model
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no model config".into()))?;
    let mut model = PmaeModel::new(cfg, dtype, 0)?;
    let missing = model.params.assign(&ckpt.params_of())?;
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
    }
    if let Some(pos) = ckpt.tensors.get(POS_EMBED) {
        model.encoder.pos_embed = pos.to_dtype(dtype)?;
    }
    Ok(model)
}

/// Rebuilds a trainer, optimizer state included, positioned at the saved step.
pub fn restore_trainer(ckpt: &Checkpoint) -> Result<Trainer> {
    if ckpt.meta.kind != CheckpointKind::Training {
        return Err(Error::Checkpoint(format!(
            "expected a training checkpoint, got {:?}",
            ckpt.meta.kind
        )));
    }
    let cfg = ckpt
        .meta
        .train
        .clone()
        .ok_or_else(|| Error::Checkpoint("no train config".into()))?;
    let total = ckpt
        .meta
        .total_steps
        .ok_or_else(|| Error::Checkpoint("no total step count".into()))?;
    let model = restore_model(ckpt, DType::F32)?;
    let mut trainer = Trainer::new(model, cfg, total)?;
    trainer.step = ckpt.meta.step;
    for (name, &t) in &ckpt.meta.optim_steps {
        let get = |k: String| {
            ckpt.tensors
                .get(&k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {k}")))
        };
        trainer.optim.state.insert(
            name.clone(),
            Moments {
                m: get(format!("optim.m.{name}"))?,
                v: get(format!("optim.v.{name}"))?,
                t,
            },
        );
    }
    Ok(trainer)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Encoder parameters the file did not provide.
    pub missing: Vec<String>,
    pub pos_embed_interpolated: bool,
}

/// Maps external names onto encoder parameter names. Accepts our own names
/// and the common MAE layout (`patch_embed.proj.*`, `blocks.*`, `norm.*`,
/// `pos_embed`).
fn encoder_name(name: &str) -> Option<String> {
    if name.starts_with("encoder.") {
        return Some(name.to_string());
    }
    if let Some(rest) = name.strip_prefix("patch_embed.proj.") {
        return Some(format!("encoder.patch_embed.{rest}"));
    }
    if name.starts_with("blocks.") || name.starts_with("norm.") || name == "pos_embed" {
        return Some(format!("encoder.{name}"));
    }
    None
}

/// Interpolates a `(n, d)` positional table (optionally with one leading
/// class row) onto a `(gh, gw)` grid.
pub fn interpolate_pos_embed(table: &Tensor, (gh, gw): (usize, usize)) -> Result<Tensor> {
    let table = match table.rank() {
        3 => table.squeeze(0)?,
        _ => table.clone(),
    };
    let (n, d) = table.dims2()?;
    let side = |m: usize| {
        let s = (m as f64).sqrt().round() as usize;
        (s * s == m).then_some(s)
    };
    let (table, s) = match (side(n), n.checked_sub(1).and_then(side)) {
        (Some(s), _) => (table, s),
        (None, Some(s)) => (table.narrow(0, 1, n - 1)?, s),
        _ => return Err(shape_err!("positional table with {n} rows is not a square grid")),
    };
    if (s, s) == (gh, gw) {
        return Ok(table);
    }
    let grid = table.reshape((s, s, d))?.permute((2, 0, 1))?.contiguous()?;
    let out = resize_bilinear(&grid, gh, gw)?;
    Ok(out.permute((1, 2, 0))?.contiguous()?.reshape((gh * gw, d))?)
}

/// Loads encoder weights by name from any named-tensor map; everything
/// that is not an encoder tensor is ignored.
pub fn load_pretrained_encoder(model: &mut PmaeModel, tensors: &BTreeMap<String, Tensor>) -> Result<LoadReport> {
    let dtype = model.dtype();
    let mut report = LoadReport::default();
    let mut values = BTreeMap::new();
    for (name, t) in tensors {
        let Some(target) = encoder_name(name) else { continue };
        if target == POS_EMBED {
            let grid = model.cfg.encoder.grid();
            let pos = interpolate_pos_embed(t, grid)?;
            if pos.dims() != model.encoder.pos_embed.dims() {
                return Err(shape_err!(
                    "positional table {:?} vs encoder {:?}",
                    pos.dims(),
                    model.encoder.pos_embed.dims()
                ));
            }
            report.pos_embed_interpolated = t.elem_count() != pos.elem_count();
            model.encoder.pos_embed = pos.to_dtype(dtype)?;
            report.loaded.push(target);
            continue;
        }
        let Some(var) = model.params.get(&target) else { continue };
        // convolutional patch embedding (d, 3, p, p) flattens to our (d, 3·p·p)
        let t = if t.dims() != var.dims() && t.elem_count() == var.elem_count() && t.rank() == 4 {
            t.reshape(var.dims())?
        } else {
            t.clone()
        };
        values.insert(target.clone(), t);
        report.loaded.push(target);
    }
    let missing = model.params.assign(&values)?;
    report.missing = missing.into_iter().filter(|n| n.starts_with("encoder.")).collect();
    info!(
        "loaded {} encoder tensors, {} missing",
        report.loaded.len(),
        report.missing.len()
    );
    Ok(report)
}

pub fn load_pretrained_file(model: &mut PmaeModel, path: &Path) -> Result<LoadReport> {
    let buf = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?
        .into_iter()
        .collect();
    load_pretrained_encoder(model, &tensors)
}
