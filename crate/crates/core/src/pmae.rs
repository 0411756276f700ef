//! Reconstruction branch: a shallow global-attention decoder that rebuilds
//! the whole padded image from the masked encoding, supervised by a
//! perceptual loss restricted to the patch edge mask.
//!
//! The perceptual features come from a frozen VGG-style stack with taps
//! named `conv1_2` (full resolution), `conv2_2` (1/2) and `conv3_2` (1/4).
//! By default its weights are drawn from [`PERCEPTUAL_SEED`]; pretrained
//! classifier weights can be loaded instead.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{unpatchify, MaskingPlan, TokenGrid};
use crate::error::{shape_err, Error, Result};
use crate::grid::BinaryGrid;
use crate::masks::{downsample_mask, PatchEdgeMask};
use crate::nn::{sincos_2d, AttentionScope, Block, FrozenConv3x3, LayerNorm, Linear, ParamStore};

/// Seed of the default frozen perceptual weights.
pub const PERCEPTUAL_SEED: u64 = 0x5045_5243_4550_5431;

/// Names of the three supervised feature taps, finest first.
pub const TAP_NAMES: [&str; 3] = ["conv1_2", "conv2_2", "conv3_2"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            dim: 128,
            depth: 2,
            heads: 4,
        }
    }

    pub fn full() -> Self {
        Self {
            dim: 512,
            depth: 8,
            heads: 16,
        }
    }

    pub fn tiny() -> Self {
        Self {
            dim: 16,
            depth: 1,
            heads: 2,
        }
    }
}

/// Reconstructed canvas `(3, H, W)`.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: Tensor,
}

pub struct ReconDecoder {
    pub cfg: DecoderConfig,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub embed: Linear,
    pub mask_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// Emits `3·p·p` pixel values per token, ordered channel, row, column.
    pub head: Linear,
}

impl ReconDecoder {
    /// `prefix` separates the branch decoder from throwaway pre-training ones.
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cfg: &DecoderConfig,
        encoder_dim: usize,
        patch_size: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let pos = sincos_2d(cfg.dim, grid)?;
        let pos_embed = Tensor::from_vec(pos, (grid.0 * grid.1, cfg.dim), ps.device())?.to_dtype(ps.dtype())?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_size,
            grid,
            embed: Linear::new(ps, &format!("{prefix}.embed"), encoder_dim, cfg.dim)?,
            mask_token: ps.normal(&format!("{prefix}.mask_token"), &[1, cfg.dim], 0.02)?,
            pos_embed,
            blocks: (0..cfg.depth)
                .map(|i| Block::new(ps, &format!("{prefix}.blocks.{i}"), cfg.dim, cfg.heads, 4))
                .collect::<Result<Vec<_>>>()?,
            norm: LayerNorm::new(ps, &format!("{prefix}.norm"), cfg.dim)?,
            head: Linear::new(ps, &format!("{prefix}.head"), cfg.dim, 3 * patch_size * patch_size)?,
        })
    }

    /// Per-patch pixel predictions `(patches, 3·p·p)` for every grid position.
    pub fn decode_patches(&self, kept: &TokenGrid, plan: &MaskingPlan) -> Result<Tensor> {
        let n_kept = kept.len();
        if kept.kept.as_deref() != Some(plan.kept.as_slice()) || n_kept != plan.kept.len() {
            return Err(shape_err!("token grid does not match the masking plan"));
        }
        if plan.total != self.grid.0 * self.grid.1 {
            return Err(shape_err!(
                "plan covers {} tokens, decoder grid {:?}",
                plan.total,
                self.grid
            ));
        }
        let emb = self.embed.forward(&kept.tokens)?;
        let rows = Tensor::cat(&[emb, self.mask_token.clone()], 0)?;
        let idx = Tensor::from_vec(plan.scatter_index(), plan.total, rows.device())?;
        let mut x = rows.index_select(&idx, 0)?.broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            x = block.forward(&x, AttentionScope::Global)?;
        }
        self.head.forward(&self.norm.forward(&x)?)
    }

    pub fn decode(&self, kept: &TokenGrid, plan: &MaskingPlan) -> Result<Reconstruction> {
        let patches = self.decode_patches(kept, plan)?;
        Ok(Reconstruction {
            image: unpatchify(&patches, self.patch_size, self.grid)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Channel widths of the three stages.
    pub widths: [usize; 3],
    #[serde(default = "default_perceptual_seed")]
    pub seed: u64,
    /// Optional safetensors file with pretrained classifier weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

fn default_perceptual_seed() -> u64 {
    PERCEPTUAL_SEED
}

impl PerceptualConfig {
    pub fn full() -> Self {
        Self {
            widths: [64, 128, 256],
            seed: PERCEPTUAL_SEED,
            weights: None,
        }
    }

    pub fn desk() -> Self {
        Self {
            widths: [16, 32, 64],
            ..Self::full()
        }
    }

    pub fn tiny() -> Self {
        Self {
            widths: [4, 8, 8],
            ..Self::full()
        }
    }
}

/// Conv layer names in execution order, with their torchvision VGG indices.
const CONV_LAYERS: [(&str, usize); 6] = [
    ("conv1_1", 0),
    ("conv1_2", 2),
    ("conv2_1", 5),
    ("conv2_2", 7),
    ("conv3_1", 10),
    ("conv3_2", 12),
];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

struct FrozenLayer {
    conv: FrozenConv3x3,
    bias: Vec<f64>,
}

/// Frozen convolutional feature extractor. Its weights live outside any
/// [`ParamStore`] and are never updated.
pub struct PerceptualStack {
    widths: [usize; 3],
    layers: Vec<FrozenLayer>,
}

/// One feature map per tap, each `(1, c, h, w)`.
pub type PerceptualFeatures = [Tensor; 3];

impl PerceptualStack {
    pub fn new(cfg: &PerceptualConfig) -> Result<Self> {
        match &cfg.weights {
            Some(path) => Self::from_file(Path::new(path), cfg.widths),
            None => Self::seeded(cfg.widths, cfg.seed),
        }
    }

    /// He-normal weights, zero biases.
    pub fn seeded(widths: [usize; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (c_in, c_out) in Self::layer_channels(widths) {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
            let w: Vec<f64> = (0..c_out * c_in * 9).map(|_| dist.sample(&mut rng)).collect();
            layers.push(FrozenLayer {
                conv: FrozenConv3x3::new(c_in, c_out, w)?,
                bias: vec![0.0; c_out],
            });
        }
        Ok(Self { widths, layers })
    }

    /// Loads `conv{s}_{k}.weight/.bias` or torchvision `features.{i}.weight/.bias`.
    pub fn from_file(path: &Path, widths: [usize; 3]) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::file(path, e))?;
        let tensors: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        Self::from_tensors(&tensors, widths)
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>, widths: [usize; 3]) -> Result<Self> {
        let mut layers = Vec::new();
        for ((name, tv_index), (c_in, c_out)) in CONV_LAYERS.iter().zip(Self::layer_channels(widths)) {
            let find = |suffix: &str| {
                tensors
                    .get(&format!("{name}.{suffix}"))
                    .or_else(|| tensors.get(&format!("features.{tv_index}.{suffix}")))
                    .ok_or_else(|| Error::Checkpoint(format!("perceptual weights lack {name}.{suffix}")))
            };
            let w = find("weight")?;
            if w.dims() != [c_out, c_in, 3, 3] {
                return Err(shape_err!(
                    "{name}.weight has shape {:?}, want {:?}",
                    w.dims(),
                    [c_out, c_in, 3, 3]
                ));
            }
            let b = find("bias")?;
            layers.push(FrozenLayer {
                conv: FrozenConv3x3::new(c_in, c_out, crate::nn::to_vec_f64(w)?)?,
                bias: crate::nn::to_vec_f64(b)?,
            });
        }
        Ok(Self { widths, layers })
    }

    fn layer_channels([a, b, c]: [usize; 3]) -> [(usize, usize); 6] {
        [(3, a), (a, a), (a, b), (b, b), (b, c), (c, c)]
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    /// Stable digest of every frozen value, for immutability checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            for v in layer.conv.weights().iter().chain(&layer.bias) {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn conv(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let layer = &self.layers[i];
        let bias =
            Tensor::from_vec(layer.bias.clone(), (1, layer.bias.len(), 1, 1), x.device())?.to_dtype(x.dtype())?;
        Ok(layer.conv.forward(x)?.broadcast_add(&bias)?)
    }

    /// Features of an image `(3, H, W)` with values in `[0, 1]`.
    pub fn features(&self, image: &Tensor) -> Result<PerceptualFeatures> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err!(
                "perceptual stack needs 3xHxW with H, W divisible by 4, got {c}x{h}x{w}"
            ));
        }
        let dev = image.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?
            .to_dtype(image.dtype())?
            .reshape((3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?
            .to_dtype(image.dtype())?
            .reshape((3, 1, 1))?;
        let x = image.broadcast_sub(&mean)?.broadcast_div(&std)?.unsqueeze(0)?;
        let x = self.conv(0, &x)?.relu()?;
        let t1 = self.conv(1, &x)?;
        let x = max_pool2(&t1.relu()?)?;
        let x = self.conv(2, &x)?.relu()?;
        let t2 = self.conv(3, &x)?;
        let x = max_pool2(&t2.relu()?)?;
        let x = self.conv(4, &x)?.relu()?;
        let t3 = self.conv(5, &x)?;
        Ok([t1, t2, t3])
    }
}

/// 2×2 max pooling as a reshape plus two max reductions. candle's
/// `max_pool2d` backward scales the gradient by the window's tie fraction
/// instead of routing it to the maximum.
fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Per-tap loss values and their sum. `total` is always the left-to-right
/// sum of the three parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReconLossBreakdown {
    pub loss_1_2: f64,
    pub loss_2_2: f64,
    pub loss_3_2: f64,
    pub total: f64,
}

impl ReconLossBreakdown {
    pub fn from_parts(loss_1_2: f64, loss_2_2: f64, loss_3_2: f64) -> Self {
        Self {
            loss_1_2,
            loss_2_2,
            loss_3_2,
            total: loss_1_2 + loss_2_2 + loss_3_2,
        }
    }
}

/// Differentiable loss terms alongside their reported values.
#[derive(Debug, Clone)]
pub struct ReconLoss {
    pub parts: [Tensor; 3],
    pub total: Tensor,
    pub breakdown: ReconLossBreakdown,
    /// False when the mask is empty and no graph was built.
    pub has_graph: bool,
}

impl ReconLoss {
    fn zero(dtype: DType, dev: &Device) -> Result<Self> {
        let z = Tensor::zeros((), dtype, dev)?;
        Ok(Self {
            parts: [z.clone(), z.clone(), z.clone()],
            total: z,
            breakdown: ReconLossBreakdown::default(),
            has_graph: false,
        })
    }
}

fn mask_tensor(mask: &BinaryGrid, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(mask.to_f32(), (1, 1, mask.height, mask.width), dev)?.to_dtype(dtype)?)
}

/// For each tap `L`: `MSE(m_L ⊙ φ_L(r), m_L ⊙ φ_L(x))`, mean over every
/// element of the feature map, where `m_L` is the patch edge mask reduced
/// to the tap's resolution. `target_features` are `φ(x)`.
pub fn masked_perceptual_loss_with(
    stack: &PerceptualStack,
    recon: &Reconstruction,
    target_features: &PerceptualFeatures,
    pm: &PatchEdgeMask,
) -> Result<ReconLoss> {
    let r = &recon.image;
    let (_, h, w) = r.dims3()?;
    if pm.grid.dims() != (h, w) {
        return Err(shape_err!(
            "patch edge mask {:?} vs reconstruction {h}x{w}",
            pm.grid.dims()
        ));
    }
    if pm.grid.is_empty_mask() {
        return ReconLoss::zero(r.dtype(), r.device());
    }
    let rf = stack.features(r)?;
    let mut parts = Vec::with_capacity(3);
    for (fr, fx) in rf.iter().zip(target_features) {
        let (_, _, th, tw) = fr.dims4()?;
        if fx.dims() != fr.dims() {
            return Err(shape_err!(
                "target features {:?} vs reconstruction {:?}",
                fx.dims(),
                fr.dims()
            ));
        }
        let m = mask_tensor(&downsample_mask(&pm.grid, (th, tw))?, r.dtype(), r.device())?;
        let diff = (fr.broadcast_mul(&m)? - fx.broadcast_mul(&m)?)?;
        parts.push(diff.sqr()?.mean_all()?);
    }
    let total = ((&parts[0] + &parts[1])? + &parts[2])?;
    let vals: Vec<f64> = parts
        .iter()
        .map(|p| p.to_dtype(DType::F64)?.to_scalar::<f64>())
        .collect::<candle_core::Result<_>>()?;
    Ok(ReconLoss {
        breakdown: ReconLossBreakdown::from_parts(vals[0], vals[1], vals[2]),
        parts: [parts[0].clone(), parts[1].clone(), parts[2].clone()],
        total,
        has_graph: true,
    })
}

pub fn masked_perceptual_loss(
    stack: &PerceptualStack,
    recon: &Reconstruction,
    target: &Tensor,
    pm: &PatchEdgeMask,
) -> Result<ReconLoss> {
    if recon.image.dims() != target.dims() {
        return Err(shape_err!(
            "reconstruction {:?} vs target {:?}",
            recon.image.dims(),
            target.dims()
        ));
    }
    if pm.grid.is_empty_mask() {
        return ReconLoss::zero(target.dtype(), target.device());
    }
    let tf = stack.features(&target.detach())?;
    masked_perceptual_loss_with(stack, recon, &tf, pm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, VitEncoder};
    use crate::masks::patch_edge_from_gt;
    use crate::nn::to_vec_f64;

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        let v: Vec<f64> = (0..3 * h * w).map(|_| d.sample(&mut rng)).collect();
        Tensor::from_vec(v, (3, h, w), &Device::Cpu).unwrap()
    }

    fn full_mask(h: usize, w: usize) -> PatchEdgeMask {
        PatchEdgeMask {
            grid: BinaryGrid::ones(h, w),
            patch_size: 4,
        }
    }

    #[test]
    fn tap_shapes() {
        let stack = PerceptualStack::seeded([4, 8, 16], 1).unwrap();
        let f = stack.features(&rand_image(32, 48, 0)).unwrap();
        assert_eq!(f[0].dims(), &[1, 4, 32, 48]);
        assert_eq!(f[1].dims(), &[1, 8, 16, 24]);
        assert_eq!(f[2].dims(), &[1, 16, 8, 12]);
    }

    #[test]
    fn perfect_reconstruction_and_empty_mask_give_zero() {
        let stack = PerceptualStack::seeded([4, 8, 8], 2).unwrap();
        let x = rand_image(32, 32, 1);
        let same =
            masked_perceptual_loss(&stack, &Reconstruction { image: x.clone() }, &x, &full_mask(32, 32)).unwrap();
        assert_eq!(same.breakdown.total, 0.0);
        let other = Reconstruction {
            image: rand_image(32, 32, 2),
        };
        let empty = PatchEdgeMask {
            grid: BinaryGrid::zeros(32, 32),
            patch_size: 4,
        };
        assert_eq!(
            masked_perceptual_loss(&stack, &other, &x, &empty)
                .unwrap()
                .breakdown
                .total,
            0.0
        );
    }

    #[test]
    fn full_mask_equals_plain_perceptual_loss() {
        let stack = PerceptualStack::seeded([4, 8, 8], 3).unwrap();
        let x = rand_image(32, 32, 3);
        let r = rand_image(32, 32, 4);
        let got = masked_perceptual_loss(&stack, &Reconstruction { image: r.clone() }, &x, &full_mask(32, 32))
            .unwrap()
            .breakdown;
        let fr = stack.features(&r).unwrap();
        let fx = stack.features(&x).unwrap();
        let plain: Vec<f64> = fr
            .iter()
            .zip(&fx)
            .map(|(a, b)| {
                let (a, b) = (to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
                a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64
            })
            .collect();
        assert!((got.loss_1_2 - plain[0]).abs() < 1e-9);
        assert!((got.loss_2_2 - plain[1]).abs() < 1e-9);
        assert!((got.loss_3_2 - plain[2]).abs() < 1e-9);
        assert_eq!(got.total, got.loss_1_2 + got.loss_2_2 + got.loss_3_2);
    }

    #[test]
    fn far_pixels_do_not_affect_loss() {
        let stack = PerceptualStack::seeded([4, 8, 8], 4).unwrap();
        let x = rand_image(64, 64, 5);
        let gt = BinaryGrid::from_fn(64, 64, |y, xx| (2..6).contains(&y) && (2..6).contains(&xx));
        let pm = patch_edge_from_gt(&gt, 1, 8).unwrap();
        assert!(pm.grid.get(63, 63) == 0);
        let r = rand_image(64, 64, 6);
        let base = masked_perceptual_loss(&stack, &Reconstruction { image: r.clone() }, &x, &pm).unwrap();
        let mut v = to_vec_f64(&r).unwrap();
        for c in 0..3 {
            v[c * 64 * 64 + 63 * 64 + 63] += 0.9;
        }
        let r2 = Tensor::from_vec(v, (3, 64, 64), &Device::Cpu).unwrap();
        let moved = masked_perceptual_loss(&stack, &Reconstruction { image: r2 }, &x, &pm).unwrap();
        assert!((base.breakdown.total - moved.breakdown.total).abs() < 1e-7);
    }

    #[test]
    fn decoder_shapes_and_reassembly() {
        let cfg = EncoderConfig::tiny();
        let mut ps = ParamStore::new(DType::F64, 5);
        let enc = VitEncoder::new(&mut ps, &cfg).unwrap();
        let dec = ReconDecoder::new(&mut ps, "recon", &DecoderConfig::tiny(), 16, 4, (8, 8)).unwrap();
        let img = rand_image(32, 32, 7);
        let (kept, plan) = enc.encode_masked(&img, 0.75, 3).unwrap();
        let patches = dec.decode_patches(&kept, &plan).unwrap();
        assert_eq!(patches.dims(), &[64, 48]);
        let rec = dec.decode(&kept, &plan).unwrap();
        assert_eq!(rec.image.dims(), &[3, 32, 32]);
        // patch at grid (gy, gx) lands at pixel block (4gy.., 4gx..)
        let p = to_vec_f64(&patches).unwrap();
        let im = to_vec_f64(&rec.image).unwrap();
        for pos in [0usize, 9, 37, 63] {
            let (gy, gx) = (pos / 8, pos % 8);
            for c in 0..3 {
                for py in 0..4 {
                    for px in 0..4 {
                        let want = p[pos * 48 + (c * 4 + py) * 4 + px];
                        let got = im[(c * 32 + gy * 4 + py) * 32 + gx * 4 + px];
                        assert_eq!(got, want);
                    }
                }
            }
        }
        // mismatched plan rejected
        let other = MaskingPlan::new(64, 0.5, 1).unwrap();
        assert!(dec.decode(&kept, &other).is_err());
    }

    #[test]
    fn zero_head_weights_give_bias_image() {
        let cfg = EncoderConfig::tiny();
        let mut ps = ParamStore::new(DType::F64, 6);
        let enc = VitEncoder::new(&mut ps, &cfg).unwrap();
        let mut dec = ReconDecoder::new(&mut ps, "recon", &DecoderConfig::tiny(), 16, 4, (8, 8)).unwrap();
        dec.head.weight = dec.head.weight.zeros_like().unwrap();
        let bias: Vec<f64> = (0..48).map(|i| i as f64 * 0.01).collect();
        dec.head.bias = Some(Tensor::from_vec(bias.clone(), 48, &Device::Cpu).unwrap());
        let (kept, plan) = enc.encode_masked(&rand_image(32, 32, 8), 0.5, 0).unwrap();
        let p = to_vec_f64(&dec.decode_patches(&kept, &plan).unwrap()).unwrap();
        for row in p.chunks(48) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn torchvision_names_accepted() {
        let stack = PerceptualStack::seeded([4, 8, 8], 9).unwrap();
        let mut map = BTreeMap::new();
        for ((name, idx), layer) in CONV_LAYERS.iter().zip(&stack.layers) {
            let _ = name;
            let (co, ci) = (layer.conv.c_out, layer.conv.c_in);
            map.insert(
                format!("features.{idx}.weight"),
                Tensor::from_vec(layer.conv.weights().to_vec(), (co, ci, 3, 3), &Device::Cpu).unwrap(),
            );
            map.insert(
                format!("features.{idx}.bias"),
                Tensor::from_vec(layer.bias.clone(), co, &Device::Cpu).unwrap(),
            );
        }
        let loaded = PerceptualStack::from_tensors(&map, [4, 8, 8]).unwrap();
        assert_eq!(loaded.fingerprint(), stack.fingerprint());
        assert!(PerceptualStack::from_tensors(&map, [8, 8, 8]).is_err());
    }
}
