//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! hard criterion fails. Advisory criteria are reported but never fail the
//! run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use common::{
    brute_auc, brute_downsample, brute_edge, brute_f1, brute_patch_edge, finite_difference_check, grads_rel_diff,
    padded_corpus, random_mask, random_pred, raw_corpus, rng,
};
use pmae::checkpoint::{restore_trainer, training_checkpoint, Checkpoint};
use pmae::data::{AugmentConfig, DistortionSpec, RawSample};
use pmae::encoder::VitEncoder;
use pmae::eval::{evaluate, pixel_auc, pixel_f1, robustness_sweep, EvalConfig, RobustnessRow};
use pmae::grid::BinaryGrid;
use pmae::masks::{downsample_mask, edge_mask, patch_edge_mask, PatchEdgeMask};
use pmae::model::{ModelConfig, PmaeModel, ENCODER_PREFIX};
use pmae::nn::{to_vec_f64, ParamStore};
use pmae::pmae::{masked_perceptual_loss, Reconstruction};
use pmae::seg::{seg_loss, PredictionMap, SegHead};
use pmae::train::{combined_loss, joint_gradients, sequential_gradients, StepReport, TrainConfig, Trainer};
use rand::Rng;

const RATIO: f64 = 0.75;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    advisory: bool,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "mask algebra oracles",
            limit: secs(30),
            advisory: false,
            run: mask_oracles,
        },
        Criterion {
            id: 2,
            name: "shape contract",
            limit: secs(10),
            advisory: false,
            run: shape_contract,
        },
        Criterion {
            id: 3,
            name: "finite-difference gradients",
            limit: secs(300),
            advisory: false,
            run: gradient_check,
        },
        Criterion {
            id: 4,
            name: "sequential vs joint backprop",
            limit: secs(60),
            advisory: false,
            run: sequential_vs_joint,
        },
        Criterion {
            id: 5,
            name: "loss degeneracies",
            limit: secs(10),
            advisory: false,
            run: loss_degeneracies,
        },
        Criterion {
            id: 6,
            name: "metric oracles",
            limit: secs(60),
            advisory: false,
            run: metric_oracles,
        },
        Criterion {
            id: 7,
            name: "overfit smoke",
            limit: secs(3 * 3600),
            advisory: false,
            run: overfit_smoke,
        },
        Criterion {
            id: 8,
            name: "lambda ablation direction",
            limit: Duration::MAX,
            advisory: true,
            run: lambda_ablation,
        },
        Criterion {
            id: 9,
            name: "determinism and resume",
            limit: secs(300),
            advisory: false,
            run: determinism,
        },
        Criterion {
            id: 10,
            name: "robustness self-consistency",
            limit: secs(900),
            advisory: false,
            run: robustness,
        },
    ];
    let filter: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut hard_failures = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_message(&e))));
        let el = t.elapsed();
        let in_time = el <= c.limit;
        let pass = res.pass && in_time;
        let tag = match (pass, c.advisory) {
            (true, _) => "PASS",
            (false, true) => "FAIL (advisory)",
            (false, false) => "FAIL",
        };
        let late = if in_time {
            String::new()
        } else {
            format!(", over the {:?} limit", c.limit)
        };
        println!(
            "[{tag}] {:>2} {}: {} ({:.1}s{late})",
            c.id,
            c.name,
            res.detail,
            el.as_secs_f64()
        );
        if !pass && !c.advisory {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        println!("{hard_failures} criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn mask_oracles() -> Outcome {
    let mut g = rng(101);
    let cases = 300;
    let mut mismatches = Vec::new();
    for case in 0..cases {
        let p = [1usize, 2, 4, 8, 16][g.random_range(0..5)];
        let (h, w) = (g.random_range(1..=64 / p) * p, g.random_range(1..=64 / p) * p);
        let r = g.random_range(1..=7);
        let gt = random_mask(h, w, &mut g);
        let e = edge_mask(&gt, r).unwrap();
        if e.grid != brute_edge(&gt, r) {
            mismatches.push(format!("edge #{case}"));
        }
        if patch_edge_mask(&e, p).unwrap().grid != brute_patch_edge(&e.grid, p) {
            mismatches.push(format!("patch edge #{case}"));
        }
        if downsample_mask(&gt, (h / p, w / p)).unwrap() != brute_downsample(&gt, h / p, w / p) {
            mismatches.push(format!("downsample #{case}"));
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("{cases} masks up to 64x64, mismatches {mismatches:?}"),
    )
}

fn expected_levels(h: usize) -> Vec<(usize, usize)> {
    (1..=4).map(|i| (h >> (i + 2), h >> (i + 2))).collect()
}

fn shape_contract() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let desk = PmaeModel::new(&ModelConfig::desk(), DType::F32, 1).unwrap();
    let x = Tensor::rand(0f32, 1f32, (3, 256, 256), &Device::Cpu).unwrap();
    let fp = desk.seg.feature_pyramid(&desk.encoder.forward(&x).unwrap()).unwrap();
    let levels: Vec<(usize, usize)> = fp.shapes().iter().map(|&(h, w, _)| (h, w)).collect();
    let pred = desk.seg.mlp_decode(&fp, desk.cfg.prediction_dims()).unwrap().dims();
    ok &= levels == expected_levels(256) && pred == (64, 64, 1);
    notes.push(format!("256: levels {levels:?} prediction {pred:?}"));

    // 1024 dry run: real patch embedding and head at ViT-B width, blocks skipped
    let full = ModelConfig::full();
    let mut ps = ParamStore::new(DType::F32, 1);
    let enc_cfg = pmae::encoder::EncoderConfig {
        depth: full.encoder.global_every,
        ..full.encoder.clone()
    };
    let enc = VitEncoder::new(&mut ps, &enc_cfg).unwrap();
    let head = SegHead::new(&mut ps, full.encoder.embed_dim, &full.seg).unwrap();
    let x = Tensor::zeros((3, 1024, 1024), DType::F32, &Device::Cpu).unwrap();
    let tokens = enc.patch_embed(&x).unwrap();
    let fp = head.feature_pyramid(&tokens).unwrap();
    let levels: Vec<(usize, usize)> = fp.shapes().iter().map(|&(h, w, _)| (h, w)).collect();
    let pred = head.mlp_decode(&fp, full.prediction_dims()).unwrap().dims();
    ok &= levels == expected_levels(1024) && pred == (256, 256, 1);
    notes.push(format!("1024: levels {levels:?} prediction {pred:?}"));
    outcome(ok, notes.join("; "))
}

fn tiny_f64(seed: u64) -> PmaeModel {
    PmaeModel::new(&ModelConfig::tiny(), DType::F64, seed).unwrap()
}

fn gradient_check() -> Outcome {
    let model = tiny_f64(21);
    let s = &padded_corpus(1, 32, 32, 3)[0];
    let mut worst = (0.0, String::new());
    for lambda in [0.01, 1.0] {
        for r in finite_difference_check(&model, s, lambda, RATIO, 9, 4) {
            if r.rel_err > worst.0 {
                worst = (r.rel_err, format!("{} at lambda {lambda}", r.name));
            }
        }
    }
    outcome(
        worst.0 <= 1e-3,
        format!(
            "{} tensors, max rel error {:.2e} ({}), tol 1e-3",
            model.params.len(),
            worst.0,
            worst.1
        ),
    )
}

fn sequential_vs_joint() -> Outcome {
    let model = tiny_f64(22);
    let batch = padded_corpus(2, 32, 32, 4);
    let mut worst = 0f64;
    for lambda in [0.01, 1.0] {
        let seq = sequential_gradients(&model, &batch, lambda, RATIO, &[11, 12])
            .unwrap()
            .grads;
        let joint = joint_gradients(&model, &batch, lambda, RATIO, &[11, 12]).unwrap();
        worst = worst.max(grads_rel_diff(&seq, &joint, ENCODER_PREFIX));
    }
    outcome(worst <= 1e-6, format!("max encoder rel diff {worst:.2e}, tol 1e-6"))
}

fn loss_value(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn loss_degeneracies() -> Outcome {
    let model = tiny_f64(23);
    let s = &padded_corpus(1, 32, 32, 5)[0];
    let x = model.image_tensor(&s.image).unwrap();
    let pm = model.patch_edge_mask(&s.mask).unwrap();
    let stack = &model.perceptual;
    let recon = model.reconstruct(&x, RATIO, 3).unwrap();

    let perfect = masked_perceptual_loss(stack, &Reconstruction { image: x.clone() }, &x, &pm).unwrap();
    let empty = PatchEdgeMask {
        grid: BinaryGrid::zeros(32, 32),
        patch_size: pm.patch_size,
    };
    let empty = masked_perceptual_loss(stack, &recon, &x, &empty).unwrap();
    let full = PatchEdgeMask {
        grid: BinaryGrid::ones(32, 32),
        patch_size: pm.patch_size,
    };
    let full = masked_perceptual_loss(stack, &recon, &x, &full)
        .unwrap()
        .breakdown
        .total;
    let (fr, fx) = (stack.features(&recon.image).unwrap(), stack.features(&x).unwrap());
    let unmasked: f64 = fr
        .iter()
        .zip(&fx)
        .map(|(a, b)| {
            let (a, b) = (to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
            a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
        })
        .sum();

    let l_seg = loss_value(&model.seg_step(s).unwrap());
    let combined = combined_loss(l_seg, full, 0.0).unwrap();
    let cfg = TrainConfig {
        lambda: 0.0,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let mut tr = Trainer::new(tiny_f64(23), cfg, 2).unwrap();
    let report = tr.train_step(std::slice::from_ref(s)).unwrap();

    let checks = [
        ("perfect", perfect.breakdown.total == 0.0),
        ("empty", empty.breakdown.total == 0.0),
        ("all-one", (full - unmasked).abs() <= 1e-9),
        ("lambda0", combined == l_seg && report.combined == report.l_seg),
    ];
    outcome(
        checks.iter().all(|c| c.1),
        format!(
            "perfect {:.1e}, empty {:.1e}, all-one |diff| {:.1e}, lambda=0 exact {}",
            perfect.breakdown.total,
            empty.breakdown.total,
            (full - unmasked).abs(),
            checks[3].1
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut g = rng(202);
    let (mut f1_bad, mut auc_err) = (0, 0f64);
    for _ in 0..500 {
        let (h, w) = (g.random_range(1..=12), g.random_range(1..=12));
        let gt = random_mask(h, w, &mut g);
        let pred = random_pred(h, w, &mut g);
        if pixel_f1(&pred, &gt, 0.5).unwrap() != brute_f1(&pred, &gt, 0.5) {
            f1_bad += 1;
        }
        match (pixel_auc(&pred, &gt).unwrap(), brute_auc(&pred, &gt)) {
            (Some(a), Some(b)) => auc_err = auc_err.max((a - b).abs()),
            (None, None) => {}
            _ => auc_err = f64::INFINITY,
        }
    }
    let mask = random_mask(16, 16, &mut g);
    let p = PredictionMap {
        logits: Tensor::zeros((16, 16), DType::F64, &Device::Cpu).unwrap(),
        decoder_dim: 1,
    };
    let bce = loss_value(&seg_loss(&p, &mask).unwrap());
    let bce_err = (bce - std::f64::consts::LN_2).abs();
    outcome(
        f1_bad == 0 && auc_err <= 1e-9 && bce_err <= 1e-4,
        format!("500 grids: F1 mismatches {f1_bad}, max AUC err {auc_err:.1e}; BCE at p=0.5 {bce:.6}"),
    )
}

fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

fn overfit_smoke() -> Outcome {
    const TOTAL: usize = 2000;
    const WINDOW: usize = 500;
    let data: Vec<RawSample> = raw_corpus(8, 192, 256, 11);
    let cfg = TrainConfig {
        base_lr: 5e-4,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let mut tr = Trainer::new(PmaeModel::new(&ModelConfig::desk(), DType::F32, 3).unwrap(), cfg, TOTAL).unwrap();
    let mut rec = Vec::with_capacity(TOTAL);
    let mut f1 = 0.0;
    while tr.step < TOTAL {
        let batch = tr.next_batch(&data).unwrap();
        rec.push(tr.train_step(&batch).unwrap().l_rec.total);
        if tr.step % WINDOW == 0 {
            f1 = evaluate(&tr.model, &data, &EvalConfig::default()).unwrap().f1;
            if f1 >= 0.9 {
                break;
            }
        }
    }
    let means = window_means(&rec, WINDOW);
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let means: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    outcome(
        f1 >= 0.9 && decreasing,
        format!(
            "train F1 {f1:.4} after {} steps (min 0.90), L_rec per {WINDOW}-step window [{}]",
            tr.step,
            means.join(", ")
        ),
    )
}

/// Fixed-size images, so padding shape cannot identify a sample.
fn fixed_size_corpus(n: usize, seed: u64) -> Vec<RawSample> {
    raw_corpus(n, 64, 64, seed)
}

fn fit_compact(data: &Vec<RawSample>, lambda: f64, seed: u64, steps: usize) -> PmaeModel {
    let cfg = TrainConfig {
        lambda,
        seed,
        base_lr: 3e-3,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let mut tr = Trainer::new(
        PmaeModel::new(&ModelConfig::compact(), DType::F32, seed).unwrap(),
        cfg,
        steps,
    )
    .unwrap();
    while tr.step < steps {
        let b = tr.next_batch(data).unwrap();
        tr.train_step(&b).unwrap();
    }
    tr.model
}

fn lambda_ablation() -> Outcome {
    let data = fixed_size_corpus(64, 100);
    let run = |lambda: f64| -> Vec<f64> {
        (1..=3)
            .map(|seed| {
                evaluate(&fit_compact(&data, lambda, seed, 3000), &data, &EvalConfig::default())
                    .unwrap()
                    .f1
            })
            .collect()
    };
    let (small, large) = (run(0.01), run(1.0));
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join("/");
    let (ms, ml) = (median(small.clone()), median(large.clone()));
    outcome(
        ms >= ml,
        format!(
            "median F1 lambda=0.01 {ms:.4} [{}] vs lambda=1 {ml:.4} [{}]",
            fmt(&small),
            fmt(&large)
        ),
    )
}

fn run_steps(tr: &mut Trainer, data: &Vec<RawSample>, n: usize) -> Vec<StepReport> {
    (0..n)
        .map(|_| {
            let b = tr.next_batch(data).unwrap();
            tr.train_step(&b).unwrap()
        })
        .collect()
}

fn desk_trainer(seed: u64) -> Trainer {
    let cfg = TrainConfig {
        seed,
        base_lr: 5e-4,
        ..Default::default()
    };
    Trainer::new(PmaeModel::new(&ModelConfig::desk(), DType::F32, seed).unwrap(), cfg, 12).unwrap()
}

fn determinism() -> Outcome {
    let data = raw_corpus(4, 160, 256, 9);
    let a = run_steps(&mut desk_trainer(5), &data, 10);
    let b = run_steps(&mut desk_trainer(5), &data, 10);

    let mut first = desk_trainer(5);
    run_steps(&mut first, &data, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.safetensors");
    training_checkpoint(&first).unwrap().save(&path).unwrap();
    drop(first);
    let mut resumed = restore_trainer(&Checkpoint::load(&path).unwrap()).unwrap();
    let c = run_steps(&mut resumed, &data, 5);
    let (same, resume) = (a == b, c == a[5..]);
    outcome(
        same && resume,
        format!("10-step reports identical {same}, resumed steps 6-10 identical {resume}"),
    )
}

fn degradation(rows: &[RobustnessRow], label: &str) -> f64 {
    rows[0].f1 - rows.iter().find(|r| r.label == label).unwrap().f1
}

fn robustness() -> Outcome {
    let specs = [
        DistortionSpec::Jpeg { quality: 100 },
        DistortionSpec::Jpeg { quality: 50 },
        DistortionSpec::GaussianBlur { kernel: 3 },
        DistortionSpec::GaussianBlur { kernel: 11 },
    ];
    let labels: Vec<String> = specs.iter().map(|s| s.label()).collect();
    let data = fixed_size_corpus(64, 100);
    let cfg = EvalConfig::default();
    let mut none_matches = true;
    let mut drops = vec![Vec::new(); 4];
    let mut base = Vec::new();
    for seed in 1..=3 {
        let model = fit_compact(&data, 0.01, seed, 3000);
        let rows = robustness_sweep(&model, &data, &specs, &cfg).unwrap();
        let plain = evaluate(&model, &data, &cfg).unwrap();
        base.push(format!("{:.3}", plain.f1));
        none_matches &=
            rows[0].distortion == DistortionSpec::None && (rows[0].f1, rows[0].auc) == (plain.f1, plain.auc);
        for (d, l) in drops.iter_mut().zip(&labels) {
            d.push(degradation(&rows, l));
        }
    }
    let m: Vec<f64> = drops.into_iter().map(median).collect();
    let trend = m[0] < m[1] && m[2] < m[3];
    outcome(
        none_matches && trend,
        format!(
            "none row equals evaluate {none_matches}; clean F1 per seed [{}]; median F1 drop q100 {:.4} vs q50 {:.4}, k3 {:.4} vs k11 {:.4}",
            base.join("/"),
            m[0],
            m[1],
            m[2],
            m[3]
        ),
    )
}
