//! Differentiable building blocks on top of `candle_core` tensors.

use candle_core::{Tensor, D};
use rand::Rng;

use super::params::{Init, ParamStore};
use crate::error::Result;

const NORM_EPS: f64 = 1e-6;

/// `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let init = if zero {
            Init::Zeros
        } else {
            Init::XavierUniform { fan_in, fan_out }
        };
        let w = store.add(&format!("{name}.weight"), &[fan_in, fan_out], init, rng)?;
        let b = store.add(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().expect("linear input has a last dim");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dim without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Ones, rng)?,
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x)?
            .broadcast_mul(&self.gain)?
            .broadcast_add(&self.bias)?)
    }
}

/// RMS normalization over the last dim with a learned gain.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    gain: Tensor,
}

impl RmsNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Ones, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(x.broadcast_div(&(ms + NORM_EPS)?.sqrt()?)?
            .broadcast_mul(&self.gain)?)
    }
}

/// `x·(1 + scale) + shift` with per-sample `(B, 1, C)` modulation.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

/// Softmax over the last dim.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Rotary tables shaped `(N, head_dim)`, applied with the rotate-half rule.
#[derive(Debug, Clone)]
pub struct Rotary {
    pub cos: Tensor,
    pub sin: Tensor,
}

impl Rotary {
    /// `x`: `(B, H, N, head_dim)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let dh = x.dim(D::Minus1)?;
        let half = dh / 2;
        let x1 = x.narrow(D::Minus1, 0, half)?;
        let x2 = x.narrow(D::Minus1, half, half)?;
        let rotated = Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?;
        Ok(x.broadcast_mul(&self.cos)?
            .add(&rotated.broadcast_mul(&self.sin)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    n_heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), hidden, 3 * hidden, false, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), hidden, hidden, false, rng)?,
            n_heads,
        })
    }

    pub fn forward(&self, x: &Tensor, rope: &Rotary) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let dh = c / self.n_heads;
        let qkv = self.qkv.forward(x)?;
        let heads = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * c, c)?
                .reshape((b, n, self.n_heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = rope.apply(&heads(0)?)?;
        let k = rope.apply(&heads(1)?)?;
        let v = heads(2)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = softmax(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, false, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, false, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Transformer block with AdaLN-Zero conditioning.
///
/// The modulation projection is zero-initialized, so a fresh block is the
/// identity on its input.
#[derive(Debug, Clone)]
pub struct DitBlock {
    ada: Linear,
    attn: Attention,
    mlp: Mlp,
}

impl DitBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        n_heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ada: Linear::new(store, &format!("{name}.ada"), hidden, 6 * hidden, true, rng)?,
            attn: Attention::new(store, &format!("{name}.attn"), hidden, n_heads, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), hidden, mlp_ratio * hidden, rng)?,
        })
    }

    /// `x`: `(B, N, C)`; `cond`: `(B, C)`, already passed through SiLU.
    pub fn forward(&self, x: &Tensor, cond: &Tensor, rope: &Rotary) -> Result<Tensor> {
        let m = self.ada.forward(cond)?.unsqueeze(1)?;
        let m = m.chunk(6, D::Minus1)?;
        let (shift_a, scale_a, gate_a) = (&m[0], &m[1], &m[2]);
        let (shift_m, scale_m, gate_m) = (&m[3], &m[4], &m[5]);
        let h = self.attn.forward(&modulate(&layer_norm(x)?, shift_a, scale_a)?, rope)?;
        let x = x.add(&h.broadcast_mul(gate_a)?)?;
        let h = self.mlp.forward(&modulate(&layer_norm(&x)?, shift_m, scale_m)?)?;
        Ok(x.add(&h.broadcast_mul(gate_m)?)?)
    }
}

/// One MLP-Mixer layer: token-mixing MLP then channel-mixing MLP, both
/// residual. Not conditioned on the class.
#[derive(Debug, Clone)]
pub struct MixerLayer {
    token_norm: LayerNorm,
    token_mlp: Mlp,
    channel_norm: LayerNorm,
    channel_mlp: Mlp,
}

impl MixerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_tokens: usize,
        dim: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            token_norm: LayerNorm::new(store, &format!("{name}.token_norm"), dim, rng)?,
            token_mlp: Mlp::new(store, &format!("{name}.token_mlp"), n_tokens, n_tokens, rng)?,
            channel_norm: LayerNorm::new(store, &format!("{name}.channel_norm"), dim, rng)?,
            channel_mlp: Mlp::new(store, &format!("{name}.channel_mlp"), dim, mlp_ratio * dim, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.token_norm.forward(x)?.transpose(1, 2)?.contiguous()?;
        let t = self.token_mlp.forward(&t)?.transpose(1, 2)?.contiguous()?;
        let x = x.add(&t)?;
        let c = self.channel_mlp.forward(&self.channel_norm.forward(&x)?)?;
        Ok(x.add(&c)?)
    }
}
