//! Encoder and decoder layers with dense multi-scale attention.
//!
//! Attention is dense over all tokens. [`AttentionStrategy::LocalWindow`]
//! adds a Gaussian locality prior whose width follows each key token's
//! level stride, which stands in for sparse sampling around reference points.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Attention, Ffn, LayerNorm, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionStrategy {
    Dense,
    /// Bias `-d^2 / (2 (scale * stride)^2)` with `d` in pixels.
    LocalWindow { scale: f64 },
}

impl Default for AttentionStrategy {
    fn default() -> Self {
        AttentionStrategy::LocalWindow { scale: 2.0 }
    }
}

impl AttentionStrategy {
    /// Bias of `queries` (normalized points) against keys with given
    /// normalized centers and strides; `None` for dense attention.
    pub fn bias(
        &self,
        queries: &[[f64; 2]],
        key_centers: &[[f64; 2]],
        key_strides: &[usize],
        image_size: (f64, f64),
        dtype: DType,
        device: &Device,
    ) -> Result<Option<Tensor>> {
        let scale = match *self {
            AttentionStrategy::Dense => return Ok(None),
            AttentionStrategy::LocalWindow { scale } => scale,
        };
        let (w, h) = image_size;
        let inv_two_var: Vec<f64> = key_strides
            .iter()
            .map(|&s| {
                let sigma = scale * s as f64;
                1.0 / (2.0 * sigma * sigma)
            })
            .collect();
        let mut data = Vec::with_capacity(queries.len() * key_centers.len());
        for q in queries {
            for (k, c) in key_centers.iter().enumerate() {
                let du = (q[0] - c[0]) * w;
                let dv = (q[1] - c[1]) * h;
                data.push(-(du * du + dv * dv) * inv_two_var[k]);
            }
        }
        Ok(Some(
            Tensor::from_vec(data, (queries.len(), key_centers.len()), device)?.to_dtype(dtype)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ffn: Ffn,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(scope: &Scope, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(&scope.pp("attn"), dim, heads)?,
            norm1: LayerNorm::new(&scope.pp("norm1"), dim)?,
            ffn: Ffn::new(&scope.pp("ffn"), dim, ffn_dim)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pos: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let q = (x + pos)?;
        let x = self.norm1.forward(&(x + self.attn.forward(&q, &q, x, bias)?)?)?;
        self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ffn: Ffn,
    norm3: LayerNorm,
}

pub struct DecoderInputs<'a> {
    pub query_pos: &'a Tensor,
    pub self_mask: Option<&'a Tensor>,
    pub memory: &'a Tensor,
    pub memory_keys: &'a Tensor,
    pub cross_bias: Option<&'a Tensor>,
}

impl DecoderLayer {
    pub fn new(scope: &Scope, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&scope.pp("self_attn"), dim, heads)?,
            norm1: LayerNorm::new(&scope.pp("norm1"), dim)?,
            cross_attn: Attention::new(&scope.pp("cross_attn"), dim, heads)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            ffn: Ffn::new(&scope.pp("ffn"), dim, ffn_dim)?,
            norm3: LayerNorm::new(&scope.pp("norm3"), dim)?,
        })
    }

    pub fn forward(&self, tgt: &Tensor, inp: &DecoderInputs<'_>) -> Result<Tensor> {
        let q = (tgt + inp.query_pos)?;
        let sa = self.self_attn.forward(&q, &q, tgt, inp.self_mask)?;
        let tgt = self.norm1.forward(&(tgt + sa)?)?;
        let q = (&tgt + inp.query_pos)?;
        let ca = self
            .cross_attn
            .forward(&q, inp.memory_keys, inp.memory, inp.cross_bias)?;
        let tgt = self.norm2.forward(&(tgt + ca)?)?;
        self.norm3.forward(&(&tgt + self.ffn.forward(&tgt)?)?)
    }
}
