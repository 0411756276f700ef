//! Layers shared by the encoder, both decoders and the perceptual stack.
//!
//! Everything is built on candle tensors so the same model code runs in
//! `f32` for training and `f64` for gradient checks.

pub mod frozen_conv;

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

pub use frozen_conv::FrozenConv3x3;

/// Named trainable tensors with deterministic initialization.
///
/// Iteration order is lexicographic by name, which fixes the order of every
/// reduction over parameters (gradient norms, checkpoints).
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

pub type NamedGrads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Glorot-uniform weight of shape `(fan_out, fan_in)`.
    pub fn xavier(&mut self, name: &str, fan_out: usize, fan_in: usize) -> Result<Tensor> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_out * fan_in).map(|_| self.rng.random_range(-a..a)).collect();
        self.insert(name, values, &[fan_out, fan_in])
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of current values.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters present in `values`; shapes must match. Returns
    /// the names that were not found in `values`.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        for (name, var) in &self.vars {
            match values.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(shape_err!(
                            "parameter `{name}`: stored shape {:?} vs model {:?}",
                            t.dims(),
                            var.dims()
                        ));
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                }
                None => missing.push(name.clone()),
            }
        }
        Ok(missing)
    }

    /// Gradients of the store's parameters found in a candle gradient store.
    pub fn collect_grads(&self, grads: &GradStore) -> NamedGrads {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(v.as_tensor()).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// `acc += other`, entrywise by name.
pub fn accumulate(acc: &mut NamedGrads, other: NamedGrads) -> Result<()> {
    for (k, g) in other {
        let merged = match acc.remove(&k) {
            Some(a) => (a + g)?,
            None => g,
        };
        acc.insert(k, merged);
    }
    Ok(())
}

pub fn scale_grads(grads: &mut NamedGrads, factor: f64) -> Result<()> {
    for g in grads.values_mut() {
        *g = g.affine(factor, 0.0)?;
    }
    Ok(())
}

/// Global L2 norm over all gradients, accumulated in `f64`.
pub fn global_norm(grads: &NamedGrads) -> Result<f64> {
    let mut total = 0f64;
    for g in grads.values() {
        total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.xavier(&format!("{name}.weight"), fan_out, fan_in)?,
            bias: Some(ps.constant(&format!("{name}.bias"), &[fan_out], 0.0)?),
        })
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        let rows = x.elem_count() / fan_in;
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension, composed from primitive ops
/// so it is differentiable in any dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head self-attention over `(batch, tokens, dim)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let pick = |i: usize| -> Result<Tensor> { Ok(qkv.get(i)?.contiguous()?.reshape((b * self.heads, t, hd))?) };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let scale = 1.0 / (hd as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .reshape((b, self.heads, t, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// How a block groups tokens for attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScope {
    Global,
    /// Non-overlapping `window × window` groups on a row-major token grid.
    Windowed {
        grid: (usize, usize),
        window: usize,
    },
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    /// `x` is `(tokens, dim)`.
    pub fn forward(&self, x: &Tensor, scope: AttentionScope) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let h = match scope {
            AttentionScope::Global => self.attn.forward(&h.unsqueeze(0)?)?.squeeze(0)?,
            AttentionScope::Windowed { grid, window } => {
                let w = window_partition(&h, grid, window)?;
                window_unpartition(&self.attn.forward(&w)?, grid, window)?
            }
        };
        let x = (x + h)?;
        let h = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + h)?)
    }
}

/// `(gh·gw, d)` → `(windows, window², d)`, windows in row-major order.
pub fn window_partition(x: &Tensor, (gh, gw): (usize, usize), ws: usize) -> Result<Tensor> {
    let d = x.dim(1)?;
    if gh % ws != 0 || gw % ws != 0 {
        return Err(shape_err!("{gh}x{gw} grid not divisible by window {ws}"));
    }
    Ok(x.reshape((gh / ws, ws, gw / ws, ws, d))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape(((gh / ws) * (gw / ws), ws * ws, d))?)
}

pub fn window_unpartition(w: &Tensor, (gh, gw): (usize, usize), ws: usize) -> Result<Tensor> {
    let d = w.dim(2)?;
    Ok(w.reshape((gh / ws, gw / ws, ws, ws, d))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape((gh * gw, d))?)
}

/// Fixed 2-D sine-cosine table `(gh·gw, dim)`. The first half of the
/// channels encodes the row index, the second half the column index.
pub fn sincos_2d(dim: usize, (gh, gw): (usize, usize)) -> Result<Vec<f64>> {
    if dim % 4 != 0 {
        return Err(Error::Invalid(format!("positional dim {dim} must be a multiple of 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Vec::with_capacity(gh * gw * dim);
    for y in 0..gh {
        for x in 0..gw {
            for pos in [y as f64, x as f64] {
                table.extend(omega.iter().map(|o| (pos * o).sin()));
                table.extend(omega.iter().map(|o| (pos * o).cos()));
            }
        }
    }
    Ok(table)
}

/// `(n_out × n_in)` half-pixel-centre bilinear interpolation weights.
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let f = pos - i0 as f64;
        m[o * n_in + i0] += 1.0 - f;
        m[o * n_in + i1] += f;
    }
    m
}

/// Bilinear resize of `(c, h, w)` to `(c, nh, nw)` as two matrix products,
/// so the backward pass is exact and cheap.
pub fn resize_bilinear(x: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if (h, w) == (nh, nw) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_weights(h, nh), (nh, h), dev)?.to_dtype(x.dtype())?;
    let awt = Tensor::from_vec(bilinear_weights(w, nw), (nw, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    // columns: (c·h, w) · (w, nw)
    let cols = x.contiguous()?.reshape((c * h, w))?.matmul(&awt)?.reshape((c, h, nw))?;
    // rows: (nh, h) · (h, c·nw)
    let t = cols.permute((1, 0, 2))?.contiguous()?.reshape((h, c * nw))?;
    let out = ah.matmul(&t)?.reshape((nh, c, nw))?.permute((1, 0, 2))?.contiguous()?;
    Ok(out)
}

/// Mean binary cross-entropy from logits:
/// `max(z, 0) − z·t + log(1 + exp(−|z|))`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus_neg_abs = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    let per = ((logits.relu()? - (logits * target)?)? + softplus_neg_abs)?;
    Ok(per.mean_all()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
