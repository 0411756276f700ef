//! Brute-force oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Tensor};
use pmae::data::synth::synthetic_corpus;
use pmae::data::{pad_to_canvas, PaddedSample, RawSample};
use pmae::grid::{BinaryGrid, ScalarGrid};
use pmae::model::PmaeModel;
use pmae::nn::to_vec_f64;
use pmae::train::sequential_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dilation minus erosion with a square window, one pixel at a time.
/// Neighbours outside the grid are ignored.
pub fn brute_edge(gt: &BinaryGrid, r: usize) -> BinaryGrid {
    let (h, w) = gt.dims();
    BinaryGrid::from_fn(h, w, |y, x| {
        let mut any = false;
        let mut all = true;
        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                let v = gt.get(yy, xx) == 1;
                any |= v;
                all &= v;
            }
        }
        any && !all
    })
}

/// Each pixel is set when any pixel of its `p × p` patch is set.
pub fn brute_patch_edge(edge: &BinaryGrid, p: usize) -> BinaryGrid {
    let (h, w) = edge.dims();
    BinaryGrid::from_fn(h, w, |y, x| {
        let (y0, x0) = (y / p * p, x / p * p);
        (y0..y0 + p).any(|yy| (x0..x0 + p).any(|xx| edge.get(yy, xx) == 1))
    })
}

/// Each target cell is set when any pixel of its footprint is.
pub fn brute_downsample(m: &BinaryGrid, th: usize, tw: usize) -> BinaryGrid {
    let (h, w) = m.dims();
    let (bh, bw) = (h / th, w / tw);
    BinaryGrid::from_fn(th, tw, |y, x| {
        (y * bh..(y + 1) * bh).any(|yy| (x * bw..(x + 1) * bw).any(|xx| m.get(yy, xx) == 1))
    })
}

/// Sets of predicted and true pixels, intersected and counted.
pub fn brute_f1(pred: &ScalarGrid, gt: &BinaryGrid, t: f64) -> f64 {
    let p: Vec<usize> = (0..pred.data.len()).filter(|&i| pred.data[i] as f64 >= t).collect();
    let g: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] == 1).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    // |P| + |G| = 2TP + FP + FN
    let tp = p.iter().filter(|i| g.contains(i)).count();
    (2 * tp) as f64 / (p.len() + g.len()) as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half, over every pair.
pub fn brute_auc(pred: &ScalarGrid, gt: &BinaryGrid) -> Option<f64> {
    let pos: Vec<f32> = (0..gt.data.len())
        .filter(|&i| gt.data[i] == 1)
        .map(|i| pred.data[i])
        .collect();
    let neg: Vec<f32> = (0..gt.data.len())
        .filter(|&i| gt.data[i] == 0)
        .map(|i| pred.data[i])
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// A mask drawn from one of several families: noise, rectangle unions,
/// blobs, empty, full.
pub fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> BinaryGrid {
    match rng.random_range(0..10) {
        0 => BinaryGrid::zeros(h, w),
        1 => BinaryGrid::ones(h, w),
        2..=4 => {
            let density = rng.random_range(0.05..0.95);
            BinaryGrid::from_fn(h, w, |_, _| rng.random_bool(density))
        }
        5..=7 => {
            let mut m = BinaryGrid::zeros(h, w);
            for _ in 0..rng.random_range(1..4) {
                let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
                for y in y0..y1 {
                    for x in x0..x1 {
                        m.set(y, x, true);
                    }
                }
            }
            m
        }
        _ => {
            let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
            let r = rng.random_range(1.0..=(h.max(w) as f64));
            BinaryGrid::from_fn(h, w, |y, x| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= r * r
            })
        }
    }
}

/// Scores on a coarse ladder, so ties and exact-threshold hits are common.
pub fn random_pred(h: usize, w: usize, g: &mut impl Rng) -> ScalarGrid {
    let levels = g.random_range(2..12);
    let data = (0..h * w)
        .map(|_| g.random_range(0..=levels) as f32 / levels as f32)
        .collect();
    ScalarGrid::new(h, w, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Synthetic tampered samples padded onto a square canvas.
pub fn padded_corpus(n: usize, canvas: usize, min_side: usize, seed: u64) -> Vec<PaddedSample> {
    raw_corpus(n, min_side, canvas, seed)
        .iter()
        .map(|s| pad_to_canvas(s, canvas, canvas).unwrap())
        .collect()
}

pub fn raw_corpus(n: usize, min_side: usize, max_side: usize, seed: u64) -> Vec<RawSample> {
    synthetic_corpus(n, min_side, max_side, seed)
        .unwrap()
        .into_iter()
        .map(|t| t.sample)
        .collect()
}

/// `L_seg + λ·L_rec` for one sample with a fixed masking seed, in f64.
pub fn combined_value(model: &PmaeModel, s: &PaddedSample, lambda: f64, ratio: f64, seed: u64) -> f64 {
    let ls = model
        .seg_step(s)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    let lr = model.recon_step(s, ratio, seed).unwrap().breakdown.total;
    ls + lambda * lr
}

/// Per-tensor relative error `‖a − f‖∞ / ‖f‖∞` between the analytic and the
/// central-difference gradient, over the `per_tensor` largest analytic
/// entries plus as many random ones.
pub struct FdReport {
    pub name: String,
    pub rel_err: f64,
    pub max_fd: f64,
}

pub fn finite_difference_check(
    model: &PmaeModel,
    s: &PaddedSample,
    lambda: f64,
    ratio: f64,
    seed: u64,
    per_tensor: usize,
) -> Vec<FdReport> {
    let analytic = sequential_gradients(model, std::slice::from_ref(s), lambda, ratio, &[seed])
        .unwrap()
        .grads;
    let mut pick_rng = rng(seed ^ 0xfd);
    let mut out = Vec::new();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let var = model.params.get(&name).unwrap();
        let shape = var.dims().to_vec();
        let base = to_vec_f64(var.as_tensor()).unwrap();
        let a = analytic
            .get(&name)
            .map(|g| to_vec_f64(g).unwrap())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let mut idx: Vec<usize> = (0..base.len()).collect();
        idx.sort_by(|&i, &j| a[j].abs().total_cmp(&a[i].abs()));
        idx.truncate(per_tensor);
        for _ in 0..per_tensor {
            idx.push(pick_rng.random_range(0..base.len()));
        }
        idx.sort_unstable();
        idx.dedup();
        let (mut num, mut den) = (0f64, 0f64);
        for &i in &idx {
            let h = 1e-6 * base[i].abs().max(1.0);
            let eval_at = |v: f64| {
                let mut p = base.clone();
                p[i] = v;
                var.set(&Tensor::from_vec(p, shape.as_slice(), var.device()).unwrap())
                    .unwrap();
                combined_value(model, s, lambda, ratio, seed)
            };
            let fd = (eval_at(base[i] + h) - eval_at(base[i] - h)) / (2.0 * h);
            num = num.max((a[i] - fd).abs());
            den = den.max(fd.abs());
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), var.device()).unwrap())
            .unwrap();
        out.push(FdReport {
            rel_err: if den == 0.0 { num } else { num / den },
            name,
            max_fd: den,
        });
    }
    out
}

pub fn grads_rel_diff(a: &pmae::nn::NamedGrads, b: &pmae::nn::NamedGrads, prefix: &str) -> f64 {
    let mut worst = 0f64;
    for (k, ga) in a.iter().filter(|(k, _)| k.starts_with(prefix)) {
        let va = to_vec_f64(ga).unwrap();
        let vb = to_vec_f64(&b[k]).unwrap();
        let num = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let den = vb.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
        worst = worst.max(num / den);
    }
    worst
}
