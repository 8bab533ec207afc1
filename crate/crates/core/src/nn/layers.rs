use candle_core::{Tensor, Var, D};

use super::params::{Init, Scope};
use crate::error::{Error, Result};

const ATTN_CHUNK_ELEMS: usize = 1 << 24;

fn fan_in_bound(fan_in: usize) -> Init {
    Init::Uniform(1.0 / (fan_in as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    in_dim: usize,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let init = fan_in_bound(in_dim);
        Ok(Self {
            weight: scope.param((out_dim, in_dim), "weight", init)?,
            bias: scope.param(out_dim, "bias", init)?,
            in_dim,
        })
    }

    pub fn with_init(scope: &Scope, in_dim: usize, out_dim: usize, weight: Init, bias: Init) -> Result<Self> {
        Ok(Self {
            weight: scope.param((out_dim, in_dim), "weight", weight)?,
            bias: scope.param(out_dim, "bias", bias)?,
            in_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.bias.dims1().unwrap_or(0)
    }

    /// `x`: `[..., in_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.dim(D::Minus1)?;
        if last != self.in_dim {
            return Err(Error::DimMismatch {
                expected: self.in_dim,
                got: last,
            });
        }
        let w = match x.rank() {
            2 => self.weight.t()?,
            r => {
                let mut w = self.weight.t()?;
                for _ in 0..r - 2 {
                    w = w.unsqueeze(0)?;
                }
                w
            }
        };
        Ok(x.broadcast_matmul(&w)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let init = fan_in_bound(in_ch * kernel * kernel);
        Ok(Self {
            weight: scope.param((out_ch, in_ch, kernel, kernel), "weight", init)?,
            bias: scope.param(out_ch, "bias", init)?,
            stride,
            padding,
        })
    }

    pub fn with_init(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: scope.param((out_ch, in_ch, kernel, kernel), "weight", init)?,
            bias: scope.param(out_ch, "bias", init)?,
            stride: 1,
            padding,
        })
    }

    /// A 3×3 convolution with "same" padding.
    pub fn same3(scope: &Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(scope, in_ch, out_ch, 3, 1, 1)
    }

    pub fn dtype(&self) -> candle_core::DType {
        self.weight.dtype()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::kernels::conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param(dim, "weight", Init::Ones)?,
            beta: scope.param(dim, "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = super::kernels::normalize_last(x, self.eps)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Batch normalization over `[B, C, H, W]` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param(channels, "weight", Init::Ones)?,
            beta: scope.param(channels, "bias", Init::Zeros)?,
            running_mean: scope.buffer(channels, "running_mean", Init::Zeros)?,
            running_var: scope.buffer(channels, "running_var", Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In training mode the batch statistics normalize the input and are folded
    /// into the running estimates; otherwise the running estimates are used.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let n = (b * h * w) as f64;
            let x = x.detach();
            let mean = (x.sum_keepdim((0, 2, 3))? / n)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = (centered.sqr()?.sum_keepdim((0, 2, 3))? / n)?;
            let m = self.momentum;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = if train {
            super::kernels::normalize_channels(x, self.eps)?
        } else {
            x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?
        };
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Multi-head scaled dot-product attention from query tokens onto context tokens.
///
/// With `null_token` enabled a learned key/value pair is appended to the context,
/// so queries can attend away from a context made of a single token.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
    null_kv: Option<(Tensor, Tensor)>,
}

impl MultiHeadAttention {
    pub fn new(
        scope: &Scope,
        dim: usize,
        context_dim: usize,
        heads: usize,
        null_token: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        let null_kv = if null_token {
            let init = Init::Uniform(1.0 / (dim as f64).sqrt());
            Some((
                scope.param(dim, "null_key", init)?,
                scope.param(dim, "null_value", init)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&scope.pp("q"), dim, dim)?,
            k: Linear::new(&scope.pp("k"), context_dim, dim)?,
            v: Linear::new(&scope.pp("v"), context_dim, dim)?,
            out: Linear::new(&scope.pp("out"), dim, dim)?,
            heads,
            dim,
            null_kv,
        })
    }

    pub fn context_dim(&self) -> usize {
        self.k.in_dim()
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x`: `[B, N, dim]`, `context`: `[B, M, context_dim]` → `[B, N, dim]`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let q = self.q.forward(x)?;
        let mut k = self.k.forward(context)?;
        let mut v = self.v.forward(context)?;
        if let Some((nk, nv)) = &self.null_kv {
            let nk = nk.reshape((1, 1, self.dim))?.broadcast_as((b, 1, self.dim))?;
            let nv = nv.reshape((1, 1, self.dim))?.broadcast_as((b, 1, self.dim))?;
            k = Tensor::cat(&[&k, &nk], 1)?;
            v = Tensor::cat(&[&v, &nv], 1)?;
        }
        let (q, k, v) = (self.split_heads(&q)?, self.split_heads(&k)?, self.split_heads(&v)?);
        let m = k.dim(2)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let attend = |q: &Tensor| super::kernels::attention(q, &k, &v, scale);
        // Bound the score matrix for long sequences by attending in query chunks.
        let chunk = (ATTN_CHUNK_ELEMS / (b * self.heads * m).max(1)).max(1);
        let y = if chunk >= n {
            attend(&q)?
        } else {
            let parts = (0..n)
                .step_by(chunk)
                .map(|s| attend(&q.narrow(2, s, chunk.min(n - s))?))
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&parts, 2)?
        };
        let y = y
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, self.dim))?;
        self.out.forward(&y)
    }
}

/// Pre-norm position-wise feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(scope: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&scope.pp("norm"), dim)?,
            fc1: Linear::new(&scope.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, dim)?,
        })
    }

    /// Returns the residual increment, not `x + ffn(x)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(&self.norm.forward(x)?)?.gelu_erf()?;
        self.fc2.forward(&h)
    }
}

/// Pre-norm Transformer encoder layer: self-attention then feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(scope: &Scope, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&scope.pp("norm"), dim)?,
            attn: MultiHeadAttention::new(&scope.pp("attn"), dim, dim, heads, false)?,
            ffn: FeedForward::new(&scope.pp("ffn"), dim, hidden)?,
        })
    }

    /// `x`: `[B, N, dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        Ok((&x + self.ffn.forward(&x)?)?)
    }
}

/// `softplus(x) = max(x, 0) + ln(1 + e^{-|x|})`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}
