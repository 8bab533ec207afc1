//! Spatial resampling expressed as dense interpolation matrices.
//!
//! Every operator here is `Y = A_h · X · A_wᵀ` for fixed row-stochastic matrices,
//! so gradients flow through ordinary matrix products.

use candle_core::{Device, DType, Tensor};

use crate::error::Result;

/// Bilinear interpolation weights with half-pixel centers (`align_corners = false`).
pub fn bilinear_weights(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

/// Adaptive average pooling weights: output cell `i` averages input cells
/// `floor(i·in/out) .. ceil((i+1)·in/out)`.
pub fn adaptive_pool_weights(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    for i in 0..out {
        let start = (i * input) / out;
        let end = ((i + 1) * input).div_ceil(out);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * input + j] = w;
        }
    }
    m
}

fn matrix(weights: Vec<f64>, rows: usize, cols: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(weights, (rows, cols), dev)?.to_dtype(dtype)?)
}

fn apply_separable(x: &Tensor, rows: Tensor, cols: Tensor) -> Result<Tensor> {
    // rows: [oh, h], cols: [ow, w]
    let y = rows.unsqueeze(0)?.unsqueeze(0)?.broadcast_matmul(x)?;
    let y = y.broadcast_matmul(&cols.t()?.unsqueeze(0)?.unsqueeze(0)?)?;
    Ok(y)
}

/// Bilinear resize of a `[B, C, H, W]` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = matrix(bilinear_weights(out_h, h), out_h, h, x.dtype(), x.device())?;
    let cols = matrix(bilinear_weights(out_w, w), out_w, w, x.dtype(), x.device())?;
    apply_separable(x, rows, cols)
}

/// Adaptive average pooling of a `[B, C, H, W]` tensor to `out_h × out_w`.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = matrix(adaptive_pool_weights(out_h, h), out_h, h, x.dtype(), x.device())?;
    let cols = matrix(adaptive_pool_weights(out_w, w), out_w, w, x.dtype(), x.device())?;
    apply_separable(x, rows, cols)
}

/// Nearest-neighbour 2× upsampling of a `[B, C, H, W]` tensor.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Host-side bilinear resize of a planar `[C, H, W]` buffer, used by image loading.
pub fn resize_planar(data: &[f32], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return data.to_vec();
    }
    let rows = bilinear_weights(out_h, h);
    let cols = bilinear_weights(out_w, w);
    let mut out = vec![0f32; c * out_h * out_w];
    let mut tmp = vec![0f64; out_h * w];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..out_h {
            for y in 0..h {
                let a = rows[oy * h + y];
                if a == 0.0 {
                    continue;
                }
                for x in 0..w {
                    tmp[oy * w + x] += a * f64::from(plane[y * w + x]);
                }
            }
        }
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for x in 0..w {
                    acc += cols[ox * w + x] * tmp[oy * w + x];
                }
                out[ch * out_h * out_w + oy * out_w + ox] = acc as f32;
            }
        }
    }
    out
}
