//! CPU kernels with hand-written gradients for the hot paths of training:
//! patch extraction for convolutions, last-axis softmax and scaled dot-product
//! attention. Work is split across threads along independent output blocks,
//! so results do not depend on the thread count.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType, D};
use rayon::prelude::*;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

// [B, C, H, W] -> [B, C*k*k, Ho*Wo]; each (batch, channel) pair fills its own row block.
fn im2col_slice<T: WithDType>(x: &[T], b: usize, g: ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); b * g.c * kk * l];
    out.par_chunks_mut(kk * l).enumerate().for_each(|(bc, block)| {
        let plane = &x[bc * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut block[(ky * g.k + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let d = &mut dst[oy * wo..][..wo];
                    for (ox, dv) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *dv = src[ix as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

// Adjoint of `im2col_slice`: [B, C*k*k, Ho*Wo] -> [B, C, H, W].
fn col2im_slice<T: WithDType>(cols: &[T], b: usize, g: ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let l = ho * wo;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); b * g.c * g.h * g.w];
    out.par_chunks_mut(g.h * g.w).enumerate().for_each(|(bc, plane)| {
        let block = &cols[bc * kk * l..][..kk * l];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &block[(ky * g.k + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    let s = &src[oy * wo..][..wo];
                    for (ox, sv) in s.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += *sv;
                        }
                    }
                }
            }
        }
    });
    out
}

struct Im2Col(ConvGeom);
struct Col2Im(ConvGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = l.dims()[0];
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((b, g.c * g.k * g.k, ho * wo));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_slice(contiguous(v, l)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_slice(contiguous(v, l)?, b, g)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = l.dims()[0];
        let shape = Shape::from((b, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_slice(contiguous(v, l)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_slice(contiguous(v, l)?, b, g)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Square-kernel 2-D convolution without bias: `x` `[B, C, H, W]`, `w` `[O, C, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let g = ConvGeom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = w.reshape((o, c * k * k))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((b, o, ho, wo))?)
}

fn softmax_rows<T: WithDType + num_traits::Float>(x: &[T], n: usize) -> Vec<T> {
    let mut out = x.to_vec();
    out.par_chunks_mut(n).for_each(|row| {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| num_traits::Float::max(a, b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    });
    out
}

struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l.dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, l)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, l)?, n)),
            _ => candle_core::bail!("softmax supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let p = res.detach();
        let dot = (grad * &p)?.sum_keepdim(D::Minus1)?;
        Ok(Some((grad.broadcast_sub(&dot)? * p)?))
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

// Per-channel statistics of a [B, C, L] buffer, reduced over B and L.
fn channel_stats<T: WithDType>(x: &[T], b: usize, c: usize, l: usize, eps: f64) -> Vec<(f64, f64)> {
    (0..c)
        .into_par_iter()
        .map(|ci| {
            let n = (b * l) as f64;
            let mut sum = 0.0;
            for bi in 0..b {
                sum += x[(bi * c + ci) * l..][..l].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for bi in 0..b {
                sq += x[(bi * c + ci) * l..][..l]
                    .iter()
                    .map(|v| (v.to_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            (mean, 1.0 / (sq / n + eps).sqrt())
        })
        .collect()
}

fn normalize_fwd<T: WithDType>(x: &[T], b: usize, c: usize, l: usize, eps: f64) -> Vec<T> {
    let stats = channel_stats(x, b, c, l, eps);
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(l).enumerate().for_each(|(row, o)| {
        let (mean, inv) = stats[row % c];
        for (o, v) in o.iter_mut().zip(&x[row * l..][..l]) {
            *o = T::from_f64((v.to_f64() - mean) * inv);
        }
    });
    out
}

fn normalize_bwd<T: WithDType>(x: &[T], g: &[T], b: usize, c: usize, l: usize, eps: f64) -> Vec<T> {
    let stats = channel_stats(x, b, c, l, eps);
    let n = (b * l) as f64;
    // Per channel: mean of the gradient and of gradient times normalized input.
    let moments: Vec<(f64, f64)> = stats
        .par_iter()
        .enumerate()
        .map(|(ci, &(mean, inv))| {
            let (mut sg, mut sgx) = (0.0, 0.0);
            for bi in 0..b {
                let off = (bi * c + ci) * l;
                for (xv, gv) in x[off..off + l].iter().zip(&g[off..off + l]) {
                    let xh = (xv.to_f64() - mean) * inv;
                    sg += gv.to_f64();
                    sgx += gv.to_f64() * xh;
                }
            }
            (sg / n, sgx / n)
        })
        .collect();
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(l).enumerate().for_each(|(row, o)| {
        let ci = row % c;
        let (mean, inv) = stats[ci];
        let (mg, mgx) = moments[ci];
        let off = row * l;
        for ((o, xv), gv) in o.iter_mut().zip(&x[off..off + l]).zip(&g[off..off + l]) {
            let xh = (xv.to_f64() - mean) * inv;
            *o = T::from_f64((gv.to_f64() - mg - xh * mgx) * inv);
        }
    });
    out
}

/// Zero-mean, unit-variance normalization of a `[B, C, L]` view, per `C`, over `B` and `L`.
struct Normalize {
    b: usize,
    c: usize,
    l: usize,
    eps: f64,
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, lay: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(normalize_fwd(contiguous(v, lay)?, self.b, self.c, self.l, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(normalize_fwd(contiguous(v, lay)?, self.b, self.c, self.l, self.eps)),
            _ => candle_core::bail!("normalize supports f32 and f64"),
        };
        Ok((out, lay.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        macro_rules! run {
            ($t:ty) => {{
                let flat = |x: &Tensor| x.detach().flatten_all().and_then(|f| f.to_vec1::<$t>());
                let dx = normalize_bwd(&flat(arg)?, &flat(grad)?, self.b, self.c, self.l, self.eps);
                Tensor::from_vec(dx, arg.shape(), arg.device())?
            }};
        }
        Ok(Some(match arg.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            d => candle_core::bail!("normalize does not support {d:?}"),
        }))
    }
}

/// Standardizes every vector along the last axis (population variance).
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.dim(D::Minus1)?;
    let rows = x.elem_count() / n.max(1);
    Ok(x.contiguous()?.apply_op1(Normalize { b: 1, c: rows, l: n, eps })?)
}

/// Standardizes each channel of `[B, C, H, W]` over batch and space (population variance).
pub fn normalize_channels(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Normalize { b, c, l: h * w, eps })?)
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    groups: usize,
    n: usize,
    m: usize,
    d: usize,
}

fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn axpy<T: num_traits::Float>(y: &mut [T], a: T, x: &[T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * *xv;
    }
}

// Attention weights of query `qi` over keys stored transposed as `kt` ([d, m]).
fn attn_probs<T: num_traits::Float>(qi: &[T], kt: &[T], m: usize, scale: T, p: &mut [T]) {
    p.iter_mut().for_each(|v| *v = T::zero());
    for (t, qv) in qi.iter().enumerate() {
        axpy(p, *qv * scale, &kt[t * m..][..m]);
    }
    let mx = p.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for pj in p.iter_mut() {
        *pj = (*pj - mx).exp();
        sum = sum + *pj;
    }
    let inv = T::one() / sum;
    for pj in p.iter_mut() {
        *pj = *pj * inv;
    }
}

fn attn_fwd<T: num_traits::Float + WithDType>(q: &[T], k: &[T], v: &[T], a: AttnDims, scale: f64) -> Vec<T> {
    let AttnDims { groups: _, n, m, d } = a;
    let scale = T::from(scale).unwrap_or_else(T::one);
    let mut out = vec![T::zero(); a.groups * n * d];
    out.par_chunks_mut(n * d).enumerate().for_each(|(g, og)| {
        let mut p = vec![T::zero(); m];
        let mut kt = vec![T::zero(); m * d];
        transpose_into(&k[g * m * d..][..m * d], m, d, &mut kt);
        let vb = &v[g * m * d..][..m * d];
        for i in 0..n {
            let row = (g * n + i) * d;
            attn_probs(&q[row..][..d], &kt, m, scale, &mut p);
            let oi = &mut og[i * d..][..d];
            for (j, pj) in p.iter().enumerate() {
                axpy(oi, *pj, &vb[j * d..][..d]);
            }
        }
    });
    out
}

#[allow(clippy::type_complexity)]
fn attn_bwd<T: num_traits::Float + WithDType>(
    q: &[T],
    k: &[T],
    v: &[T],
    grad: &[T],
    a: AttnDims,
    scale: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { groups, n, m, d } = a;
    let scale = T::from(scale).unwrap_or_else(T::one);
    let mut dq = vec![T::zero(); groups * n * d];
    let mut dk = vec![T::zero(); groups * m * d];
    let mut dv = vec![T::zero(); groups * m * d];
    dq.par_chunks_mut(n * d)
        .zip(dk.par_chunks_mut(m * d))
        .zip(dv.par_chunks_mut(m * d))
        .enumerate()
        .for_each(|(g, ((dqg, dkg), dvg))| {
            let base = g * m * d;
            let mut p = vec![T::zero(); m];
            let mut dp = vec![T::zero(); m];
            let mut kt = vec![T::zero(); m * d];
            let mut vt = vec![T::zero(); m * d];
            transpose_into(&k[base..][..m * d], m, d, &mut kt);
            transpose_into(&v[base..][..m * d], m, d, &mut vt);
            for i in 0..n {
                let row = (g * n + i) * d;
                let qi = &q[row..][..d];
                let go = &grad[row..][..d];
                attn_probs(qi, &kt, m, scale, &mut p);
                dp.iter_mut().for_each(|x| *x = T::zero());
                for (t, gv) in go.iter().enumerate() {
                    axpy(&mut dp, *gv, &vt[t * m..][..m]);
                }
                let total = p.iter().zip(&dp).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
                let dqi = &mut dqg[i * d..][..d];
                for j in 0..m {
                    let s = p[j] * (dp[j] - total) * scale;
                    axpy(dqi, s, &k[base + j * d..][..d]);
                    axpy(&mut dkg[j * d..][..d], s, qi);
                    axpy(&mut dvg[j * d..][..d], p[j], go);
                }
            }
        });
    (dq, dk, dv)
}

fn attn_dims(q: &[usize], k: &[usize]) -> candle_core::Result<AttnDims> {
    let r = q.len();
    if r < 2 || k.len() != r {
        candle_core::bail!("attention expects [..., N, d] inputs");
    }
    Ok(AttnDims {
        groups: q[..r - 2].iter().product(),
        n: q[r - 2],
        m: k[r - 2],
        d: q[r - 1],
    })
}

struct Attention {
    scale: f64,
}

impl CustomOp3 for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let a = attn_dims(l1.dims(), l2.dims())?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(q), CpuStorage::F32(k), CpuStorage::F32(v)) => {
                CpuStorage::F32(attn_fwd(contiguous(q, l1)?, contiguous(k, l2)?, contiguous(v, l3)?, a, self.scale))
            }
            (CpuStorage::F64(q), CpuStorage::F64(k), CpuStorage::F64(v)) => {
                CpuStorage::F64(attn_fwd(contiguous(q, l1)?, contiguous(k, l2)?, contiguous(v, l3)?, a, self.scale))
            }
            _ => candle_core::bail!("attention supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let a = attn_dims(q.dims(), k.dims())?;
        let dev = q.device();
        macro_rules! run {
            ($t:ty) => {{
                let flat = |x: &Tensor| x.detach().flatten_all().and_then(|f| f.to_vec1::<$t>());
                let (dq, dk, dv) = attn_bwd(&flat(q)?, &flat(k)?, &flat(v)?, &flat(grad)?, a, self.scale);
                (
                    Tensor::from_vec(dq, q.shape(), dev)?,
                    Tensor::from_vec(dk, k.shape(), dev)?,
                    Tensor::from_vec(dv, v.shape(), dev)?,
                )
            }};
        }
        let (dq, dk, dv) = match q.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            d => candle_core::bail!("attention does not support {d:?}"),
        };
        Ok((Some(dq), Some(dk), Some(dv)))
    }
}

/// `softmax(q kᵀ · scale) v` over `[..., N, d]` / `[..., M, d]` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(q.contiguous()?
        .apply_op3(&k.contiguous()?, &v.contiguous()?, Attention { scale })?)
}
