//! Windowed ViT encoder over the padded canvas.
//!
//! Tokens are spatial only (no class token), laid out row-major on the patch
//! grid, with a fixed 2-D sine-cosine positional table added at embedding
//! time. Every `global_every`-th block attends over all tokens; the others
//! attend within non-overlapping windows. The masked pass used by the
//! reconstruction branch runs every block globally over the kept tokens.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{sincos_2d, AttentionScope, Block, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Window side, in patches.
    pub window_size: usize,
    pub global_every: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl EncoderConfig {
    /// 256 px canvas, 4 blocks with every second one global.
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 192,
            depth: 4,
            heads: 3,
            window_size: 4,
            global_every: 2,
            height: 256,
            width: 256,
            mlp_ratio: 4,
        }
    }

    /// ViT-B at a 1024 px canvas, 12 blocks with every third one global.
    pub fn full() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            window_size: 8,
            global_every: 3,
            height: 1024,
            width: 1024,
            mlp_ratio: 4,
        }
    }

    /// Gradient-check scale: 32 px canvas, 8x8 patch grid.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            window_size: 2,
            global_every: 2,
            height: 32,
            width: 32,
            mlp_ratio: 2,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("encoder.{field}"), msg));
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return err(
                "patch_size",
                format!(
                    "{}x{} canvas not divisible by patch {}",
                    self.height, self.width, self.patch_size
                ),
            );
        }
        if self.global_every == 0 || self.depth % self.global_every != 0 {
            return err(
                "global_every",
                format!("depth {} not divisible by {}", self.depth, self.global_every),
            );
        }
        let (gh, gw) = self.grid();
        if self.window_size == 0 || gh % self.window_size != 0 || gw % self.window_size != 0 {
            return err(
                "window_size",
                format!("{gh}x{gw} patch grid not divisible by window {}", self.window_size),
            );
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(
                "heads",
                format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads),
            );
        }
        if self.embed_dim % 4 != 0 {
            return err(
                "embed_dim",
                "must be a multiple of 4 for the 2-D positional table".into(),
            );
        }
        Ok(())
    }

    /// 1-based block `b` is global iff `b % global_every == 0`.
    pub fn is_global(&self, block: usize) -> bool {
        (block + 1) % self.global_every == 0
    }

    pub fn schedule(&self) -> Vec<AttentionScope> {
        (0..self.depth)
            .map(|b| {
                if self.is_global(b) {
                    AttentionScope::Global
                } else {
                    AttentionScope::Windowed {
                        grid: self.grid(),
                        window: self.window_size,
                    }
                }
            })
            .collect()
    }
}

/// Encoder tokens. `kept` is `Some` for the masked pass and lists the grid
/// positions of the rows of `tokens`.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub kept: Option<Vec<usize>>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.kept.is_none() && self.len() == self.grid.0 * self.grid.1
    }
}

/// Partition of the patch indices into kept and masked sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPlan {
    pub ratio: f64,
    pub total: usize,
    /// Ascending.
    pub kept: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskingPlan {
    /// `round(ratio · total)` positions drawn uniformly without replacement,
    /// leaving at least one token visible.
    pub fn new(total: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Invalid(format!("mask ratio {ratio} outside (0, 1)")));
        }
        if total == 0 {
            return Err(Error::Invalid("cannot mask an empty token set".into()));
        }
        let n_masked = ((ratio * total as f64).round() as usize).min(total - 1);
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut masked = order[..n_masked].to_vec();
        let mut kept = order[n_masked..].to_vec();
        masked.sort_unstable();
        kept.sort_unstable();
        Ok(Self {
            ratio,
            total,
            kept,
            masked,
            seed,
        })
    }

    /// For each grid position, the row of the kept tensor holding it, or
    /// `kept.len()` for masked positions.
    pub fn scatter_index(&self) -> Vec<u32> {
        let mut idx = vec![self.kept.len() as u32; self.total];
        for (row, &pos) in self.kept.iter().enumerate() {
            idx[pos] = row as u32;
        }
        idx
    }
}

pub struct VitEncoder {
    pub cfg: EncoderConfig,
    pub patch_proj: Linear,
    /// Fixed positional table `(tokens, dim)`; not trained.
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// `(3, H, W)` → `(patches, 3·p·p)`, each row ordered channel, row, column.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if h % p != 0 || w % p != 0 {
        return Err(shape_err!("{h}x{w} image not divisible into {p}px patches"));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(image
        .reshape((c, gh, p, gw, p))?
        .permute((1, 3, 0, 2, 4))?
        .contiguous()?
        .reshape((gh * gw, c * p * p))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, p: usize, (gh, gw): (usize, usize)) -> Result<Tensor> {
    let (n, d) = patches.dims2()?;
    if n != gh * gw || d % (p * p) != 0 {
        return Err(shape_err!("{n}x{d} patches do not tile a {gh}x{gw} grid of {p}px"));
    }
    let c = d / (p * p);
    Ok(patches
        .reshape((gh, gw, c, p, p))?
        .permute((2, 0, 3, 1, 4))?
        .contiguous()?
        .reshape((c, gh * p, gw * p))?)
}

impl VitEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_proj = Linear::new(ps, "encoder.patch_embed", cfg.patch_dim(), cfg.embed_dim)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Block::new(
                    ps,
                    &format!("encoder.blocks.{i}"),
                    cfg.embed_dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(ps, "encoder.norm", cfg.embed_dim)?;
        let pos = sincos_2d(cfg.embed_dim, cfg.grid())?;
        let pos_embed = Tensor::from_vec(pos, (cfg.num_patches(), cfg.embed_dim), ps.device())?.to_dtype(ps.dtype())?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn dtype(&self) -> DType {
        self.pos_embed.dtype()
    }

    /// One token per non-overlapping patch: linear projection plus the
    /// positional table.
    pub fn patch_embed(&self, image: &Tensor) -> Result<TokenGrid> {
        let (_, h, w) = image.dims3()?;
        if (h, w) != (self.cfg.height, self.cfg.width) {
            return Err(shape_err!(
                "encoder built for {}x{}, got {h}x{w}",
                self.cfg.height,
                self.cfg.width
            ));
        }
        let patches = patchify(image, self.cfg.patch_size)?;
        let tokens = self.patch_proj.forward(&patches)?.broadcast_add(&self.pos_embed)?;
        Ok(TokenGrid {
            tokens,
            grid: self.cfg.grid(),
            kept: None,
        })
    }

    /// Runs all blocks on a full token grid with the windowed/global schedule.
    pub fn encode(&self, tokens: &TokenGrid) -> Result<TokenGrid> {
        if !tokens.is_full() {
            return Err(shape_err!("windowed encode needs the full token grid"));
        }
        let mut x = tokens.tokens.clone();
        for (block, scope) in self.blocks.iter().zip(self.cfg.schedule()) {
            x = block.forward(&x, scope)?;
        }
        Ok(TokenGrid {
            tokens: self.norm.forward(&x)?,
            grid: tokens.grid,
            kept: None,
        })
    }

    /// `patch_embed` followed by `encode`.
    pub fn forward(&self, image: &Tensor) -> Result<TokenGrid> {
        self.encode(&self.patch_embed(image)?)
    }

    /// Masked pass: embed, drop the masked tokens, then global attention over
    /// the kept set in every block.
    pub fn encode_masked(&self, image: &Tensor, ratio: f64, seed: u64) -> Result<(TokenGrid, MaskingPlan)> {
        let (kept, plan) = random_mask(&self.patch_embed(image)?, ratio, seed)?;
        let mut x = kept.tokens;
        for block in &self.blocks {
            x = block.forward(&x, AttentionScope::Global)?;
        }
        let out = TokenGrid {
            tokens: self.norm.forward(&x)?,
            grid: kept.grid,
            kept: kept.kept,
        };
        Ok((out, plan))
    }
}

/// Keeps a uniformly random subset of tokens; deterministic in `seed`.
pub fn random_mask(tokens: &TokenGrid, ratio: f64, seed: u64) -> Result<(TokenGrid, MaskingPlan)> {
    if !tokens.is_full() {
        return Err(shape_err!("random_mask needs the full token grid"));
    }
    let plan = MaskingPlan::new(tokens.len(), ratio, seed)?;
    let idx: Vec<u32> = plan.kept.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, plan.kept.len(), tokens.tokens.device())?;
    let kept = tokens.tokens.index_select(&idx, 0)?;
    Ok((
        TokenGrid {
            tokens: kept,
            grid: tokens.grid,
            kept: Some(plan.kept.clone()),
        },
        plan,
    ))
}
