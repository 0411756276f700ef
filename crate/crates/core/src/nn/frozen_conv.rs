//! 3×3, stride 1, zero-padding 1 convolution with fixed weights.
//!
//! Implemented as a candle custom op (im2col + GEMM) whose backward pass
//! returns only the input gradient: the weights never train, so computing
//! their gradient would be wasted work.

use std::sync::Arc;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// Output rows processed per im2col block; bounds the scratch buffer.
const ROW_BLOCK: usize = 32;

#[derive(Debug, Clone)]
pub struct FrozenConv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    /// `(c_out, c_in, 3, 3)` row-major.
    weights64: Arc<Vec<f64>>,
    weights32: Arc<Vec<f32>>,
}

impl FrozenConv3x3 {
    pub fn new(c_in: usize, c_out: usize, weights: Vec<f64>) -> candle_core::Result<Self> {
        if weights.len() != c_out * c_in * 9 {
            candle_core::bail!(
                "conv weights: expected {} values, got {}",
                c_out * c_in * 9,
                weights.len()
            );
        }
        let weights32 = Arc::new(weights.iter().map(|&v| v as f32).collect());
        Ok(Self {
            c_in,
            c_out,
            weights64: Arc::new(weights),
            weights32,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights64
    }

    /// Kernel of the adjoint map: channels swapped and taps rotated 180°.
    pub fn adjoint(&self) -> Self {
        let (ci, co) = (self.c_in, self.c_out);
        let mut w = vec![0.0; ci * co * 9];
        for o in 0..co {
            for i in 0..ci {
                for k in 0..9 {
                    w[(i * co + o) * 9 + (8 - k)] = self.weights64[(o * ci + i) * 9 + k];
                }
            }
        }
        Self::new(co, ci, w).expect("sizes consistent")
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op1(self.clone())
    }
}

trait Gemm: Copy + Default + Send + Sync + 'static {
    /// `c[m×n] = a[m×k] · b[k×n]`, `c` with row stride `rsc`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], rsc: usize);
}

impl Gemm for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], rsc: usize) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= (m - 1) * rsc + n);
        // SAFETY: bounds checked above; strides describe row-major buffers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            )
        }
    }
}

impl Gemm for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], rsc: usize) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= (m - 1) * rsc + n);
        // SAFETY: bounds checked above; strides describe row-major buffers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            )
        }
    }
}

fn conv3x3<T: Gemm>(input: &[T], n: usize, ci: usize, h: usize, w: usize, weights: &[T], co: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::default(); n * co * hw];
    let mut cols = vec![T::default(); ci * 9 * ROW_BLOCK.min(h) * w];
    for b in 0..n {
        let src = &input[b * ci * hw..(b + 1) * ci * hw];
        let dst = &mut out[b * co * hw..(b + 1) * co * hw];
        for y0 in (0..h).step_by(ROW_BLOCK) {
            let y1 = (y0 + ROW_BLOCK).min(h);
            let cols_n = (y1 - y0) * w;
            for c in 0..ci {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let row = &mut cols[((c * 3 + ky) * 3 + kx) * cols_n..][..cols_n];
                        for y in y0..y1 {
                            let line = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                line.fill(T::default());
                                continue;
                            }
                            let srow = &src[c * hw + sy as usize * w..][..w];
                            for (x, v) in line.iter_mut().enumerate() {
                                let sx = x as isize + kx as isize - 1;
                                *v = if sx < 0 || sx >= w as isize {
                                    T::default()
                                } else {
                                    srow[sx as usize]
                                };
                            }
                        }
                    }
                }
            }
            T::gemm(
                co,
                ci * 9,
                cols_n,
                weights,
                &cols[..ci * 9 * cols_n],
                &mut dst[y0 * w..],
                hw,
            );
        }
    }
    out
}

impl CustomOp1 for FrozenConv3x3 {
    fn name(&self) -> &'static str {
        "frozen-conv3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        if c != self.c_in {
            candle_core::bail!("frozen conv expects {} input channels, got {c}", self.c_in);
        }
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("frozen conv requires a contiguous input");
        };
        let shape = Shape::from((n, self.c_out, h, w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(conv3x3(&v[start..end], n, c, h, w, &self.weights32, self.c_out)),
            CpuStorage::F64(v) => CpuStorage::F64(conv3x3(&v[start..end], n, c, h, w, &self.weights64, self.c_out)),
            other => candle_core::bail!("frozen conv: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(self.adjoint().forward(grad_res)?))
    }
}
