use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::Args;
use log::info;
use pmae::checkpoint::{
    load_pretrained_file, model_checkpoint, pretrain_checkpoint, restore_model, restore_trainer, training_checkpoint,
    Checkpoint,
};
use pmae::config::ExperimentConfig;
use pmae::data::io::{load_image, load_mask, save_image, save_mask, save_overlay, save_probability};
use pmae::data::synth::{synthetic_corpus, unlabeled_corpus};
use pmae::data::{
    crop_to_extent, default_robustness_specs, load_manifest, prepare_for_canvas, DatasetManifest, Label, ManifestEntry,
    RawSample, SampleSource,
};
use pmae::eval::{evaluate, robustness_sweep, EvalResult};
use pmae::grid::{BinaryGrid, ImageGrid};
use pmae::masks::{edge_mask, patch_edge_mask};
use pmae::model::PmaeModel;
use pmae::report::{eval_table, robustness_plot, robustness_table, write_jsonl};
use pmae::seeds;
use pmae::train::{toy_mae_pretrain, FitSummary, Trainer, LAMBDA_SWEEP};
use serde::Serialize;

use crate::{Cli, Command};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of tampered image/mask pairs.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 160)]
    pub min_side: usize,
    #[arg(long, default_value_t = 256)]
    pub max_side: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Images to pre-train on; procedural images when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Size of the procedural corpus.
    #[arg(long, default_value_t = 256)]
    pub synthetic: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest; defaults to `data.train_manifest`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Held-out manifest for periodic evaluation; defaults to `data.eval_manifest`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Encoder weights from `pretrain` or an MAE-style safetensors file.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Training checkpoint to continue from.
    #[arg(long, conflicts_with_all = ["pretrained", "lambda_sweep"])]
    pub resume: Option<PathBuf>,
    /// Train once per λ in the search grid, each into its own subdirectory.
    #[arg(long)]
    pub lambda_sweep: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifests to score; defaults to `data.eval_manifest`.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `data.eval_manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Ground-truth mask image.
    #[arg(long)]
    pub mask: PathBuf,
    /// Edge band radius; defaults to `model.mask_radius`.
    #[arg(long)]
    pub radius: Option<usize>,
    /// Patch size; defaults to the encoder's.
    #[arg(long)]
    pub patch: Option<usize>,
}

pub fn run(cli: &Cli) -> Result<()> {
    let (cfg, out) = cli.global.resolve()?;
    match &cli.command {
        Command::Synth(a) => synth(&cfg, &out, a),
        Command::Pretrain(a) => pretrain(&cfg, &out, a),
        Command::Train(a) => train(&cfg, &out, a),
        Command::Eval(a) => eval(&cfg, &out, a),
        Command::Robustness(a) => robustness(&cfg, &out, a),
        Command::Predict(a) => predict(&cfg, &out, a),
        Command::InspectMasks(a) => inspect_masks(&cfg, &out, a),
    }
}

fn manifest_or(arg: Option<&PathBuf>, fallback: Option<&PathBuf>, key: &str) -> Result<DatasetManifest> {
    let path = arg
        .or(fallback)
        .ok_or_else(|| pmae::Error::config(key, "no manifest given on the command line or in the config"))?;
    let m = load_manifest(path)?;
    info!("{}: {}", path.display(), m.summary());
    Ok(m)
}

fn load_model(path: &Path) -> Result<PmaeModel> {
    let ckpt = Checkpoint::load(path)?;
    Ok(restore_model(&ckpt, DType::F32).with_context(|| format!("restoring {}", path.display()))?)
}

fn synth(cfg: &ExperimentConfig, out: &Path, a: &SynthArgs) -> Result<()> {
    if a.min_side == 0 || a.min_side > a.max_side {
        bail!(pmae::Error::Invalid(format!(
            "side range {}..={} is empty",
            a.min_side, a.max_side
        )));
    }
    let seed = seeds::derive(cfg.train.seed, seeds::SYNTH, 0, 0);
    let (images, masks) = (out.join("images"), out.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let mut entries = Vec::with_capacity(a.n);
    for (i, t) in synthetic_corpus(a.n, a.min_side, a.max_side, seed)?
        .into_iter()
        .enumerate()
    {
        let (ip, mp) = (images.join(format!("{i:05}.png")), masks.join(format!("{i:05}.png")));
        save_image(&t.sample.image, &ip)?;
        save_mask(&t.sample.mask, &mp)?;
        entries.push(ManifestEntry {
            image: ip,
            mask: Some(mp),
            label: Label::Manipulated,
        });
    }
    let manifest = DatasetManifest { entries };
    let path = out.join("manifest.jsonl");
    manifest.write(&path)?;
    println!("wrote {} to {}", manifest.summary(), path.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, out: &Path, a: &PretrainArgs) -> Result<()> {
    let (h, w) = cfg.model.canvas();
    let corpus: Vec<ImageGrid> = match &a.manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            (0..m.len())
                .map(|i| {
                    let raw = RawSample::authentic(m.get(i)?.image);
                    Ok(prepare_for_canvas(&raw, h, w)?.image)
                })
                .collect::<pmae::Result<_>>()?
        }
        None => unlabeled_corpus(a.synthetic, h, w, seeds::derive(cfg.pretrain.seed, seeds::SYNTH, 0, 0)),
    };
    info!(
        "pre-training on {} images for {} steps",
        corpus.len(),
        cfg.pretrain.steps
    );
    let outcome = toy_mae_pretrain(&corpus, &cfg.model.encoder, &cfg.pretrain)?;
    let path = out.join("mae_encoder.safetensors");
    pretrain_checkpoint(&outcome, cfg.pretrain.steps)?.save(&path)?;
    #[derive(Serialize)]
    struct Row {
        step: usize,
        loss: f64,
    }
    let rows: Vec<Row> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| Row { step: i + 1, loss })
        .collect();
    write_jsonl(&out.join("pretrain_log.jsonl"), &rows)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!("final masked-patch loss {last:.5}; encoder saved to {}", path.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path, a: &TrainArgs) -> Result<()> {
    let data = manifest_or(
        a.train.as_ref(),
        cfg.data.train_manifest.as_ref(),
        "data.train_manifest",
    )?;
    let eval = match a.eval.as_ref().or(cfg.data.eval_manifest.as_ref()) {
        Some(p) => Some(manifest_or(Some(p), None, "data.eval_manifest")?),
        None => None,
    };
    if !a.lambda_sweep {
        let summary = train_once(cfg, out, a, &data, eval.as_ref())?;
        println!("{} steps, best eval F1 {}", summary.steps, fmt_opt(summary.best_f1));
        return Ok(());
    }
    #[derive(Serialize)]
    struct SweepRow {
        lambda: f64,
        steps: usize,
        best_f1: Option<f64>,
    }
    let mut rows = Vec::new();
    for lambda in LAMBDA_SWEEP {
        let mut c = cfg.clone();
        c.train.lambda = lambda;
        let dir = out.join(format!("lambda_{lambda}"));
        c.write_snapshot(&dir)?;
        info!("λ = {lambda}");
        let s = train_once(&c, &dir, a, &data, eval.as_ref())?;
        rows.push(SweepRow {
            lambda,
            steps: s.steps,
            best_f1: s.best_f1,
        });
    }
    write_jsonl(&out.join("lambda_sweep.jsonl"), &rows)?;
    println!("{:>8} {:>8} {:>8}", "lambda", "steps", "best F1");
    for r in &rows {
        println!("{:>8} {:>8} {:>8}", r.lambda, r.steps, fmt_opt(r.best_f1));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |f| format!("{f:.4}"))
}

fn train_once(
    cfg: &ExperimentConfig,
    out: &Path,
    a: &TrainArgs,
    data: &DatasetManifest,
    eval: Option<&DatasetManifest>,
) -> Result<FitSummary> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = restore_trainer(&Checkpoint::load(p)?)?;
            info!("resuming at step {} of {}", t.step, t.total_steps);
            t
        }
        None => {
            let mut model = PmaeModel::new(&cfg.model, DType::F32, cfg.train.seed)?;
            if let Some(p) = &a.pretrained {
                let r = load_pretrained_file(&mut model, p)?;
                info!("loaded {} encoder tensors, {} missing", r.loaded.len(), r.missing.len());
            }
            let total = cfg.train.total_steps(data.len());
            Trainer::new(model, cfg.train.clone(), total)?
        }
    };
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let best = out.join("best.safetensors");
    let summary = trainer.fit(
        data,
        eval.map(|e| e as &dyn SampleSource),
        &mut log,
        &mut |t, _, improved| {
            if improved {
                model_checkpoint(&t.model, t.step)?.save(&best)?;
            }
            Ok(())
        },
    )?;
    training_checkpoint(&trainer)?.save(&out.join("last.safetensors"))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn eval(cfg: &ExperimentConfig, out: &Path, a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let paths: Vec<PathBuf> = if a.manifests.is_empty() {
        cfg.data.eval_manifest.iter().cloned().collect()
    } else {
        a.manifests.clone()
    };
    if paths.is_empty() {
        bail!(pmae::Error::config(
            "data.eval_manifest",
            "no manifest given on the command line or in the config"
        ));
    }
    let mut results: Vec<EvalResult> = Vec::new();
    for p in &paths {
        let m = manifest_or(Some(p), None, "data.eval_manifest")?;
        let mut ecfg = cfg.eval.clone();
        ecfg.dataset = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        results.push(evaluate(&model, &m, &ecfg)?);
    }
    write_jsonl(&out.join("eval.jsonl"), &results)?;
    print!("{}", eval_table(&results));
    Ok(())
}

fn robustness(cfg: &ExperimentConfig, out: &Path, a: &RobustnessArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let m = manifest_or(
        a.manifest.as_ref(),
        cfg.data.eval_manifest.as_ref(),
        "data.eval_manifest",
    )?;
    let rows = robustness_sweep(&model, &m, &default_robustness_specs(), &cfg.eval)?;
    write_jsonl(&out.join("robustness.jsonl"), &rows)?;
    robustness_plot(&rows, &out.join("robustness.png"))?;
    print!("{}", robustness_table(&rows));
    Ok(())
}

fn predict(cfg: &ExperimentConfig, out: &Path, a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (h, w) = model.cfg.canvas();
    let padded = prepare_for_canvas(&RawSample::authentic(load_image(&a.image)?), h, w)?;
    let prob = model.predict_probability(&padded.image, padded.orig_extent)?;
    let t = cfg.eval.threshold as f32;
    let mask = BinaryGrid::from_threshold(prob.height, prob.width, &prob.data, t);
    let stem = a
        .image
        .file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    save_probability(&prob, &out.join(format!("{stem}_prob.png")))?;
    save_mask(&mask, &out.join(format!("{stem}_mask.png")))?;
    save_overlay(
        &crop_to_extent(&padded).image,
        &prob,
        t,
        &out.join(format!("{stem}_overlay.png")),
    )?;
    let frac = mask.count_ones() as f64 / (mask.height * mask.width) as f64;
    println!("{stem}: {:.2}% of pixels above {t}", 100.0 * frac);
    Ok(())
}

fn inspect_masks(cfg: &ExperimentConfig, out: &Path, a: &InspectArgs) -> Result<()> {
    let gt = load_mask(&a.mask)?;
    let r = a.radius.unwrap_or(cfg.model.mask_radius);
    let p = a.patch.unwrap_or(cfg.model.encoder.patch_size);
    if p == 0 {
        bail!(pmae::Error::Invalid("patch size must be positive".into()));
    }
    // zero-pad up to whole patches, as on the training canvas
    let (h, w) = (gt.height.div_ceil(p) * p, gt.width.div_ceil(p) * p);
    let padded = BinaryGrid::from_fn(h, w, |y, x| y < gt.height && x < gt.width && gt.get(y, x) == 1);
    let edge = edge_mask(&padded, r)?;
    let patch = patch_edge_mask(&edge, p)?;
    save_mask(&edge.grid, &out.join("edge.png"))?;
    save_mask(&patch.grid, &out.join("patch_edge.png"))?;
    println!(
        "tampered {} px, edge band {} px (radius {r}), patch edge {} px (patch {p})",
        gt.count_ones(),
        edge.grid.count_ones(),
        patch.grid.count_ones()
    );
    Ok(())
}
