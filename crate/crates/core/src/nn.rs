//! Differentiable layers over candle tensors, with a seeded parameter store.
//!
//! All per-sample activations are 2-D `(tokens, channels)`; batching happens
//! at the loss level.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Additive attention bias for disallowed positions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named learnable tensors. Creation order and the seed fully determine the
/// initial values.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn get_or_create(&self, path: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store lock");
        if let Some(v) = inner.vars.get(path) {
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.gen_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box-Muller keeps the stream independent of distribution crates.
                    let u1: f64 = inner.rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = inner.rng.gen();
                    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(path.to_string(), var);
        Ok(out)
    }

    /// All parameters, sorted by path.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store lock");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, path: &str) -> Option<Var> {
        self.inner
            .lock()
            .expect("param store lock")
            .vars
            .get(path)
            .cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        self.store.get_or_create(&self.path(name), shape, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self::with_init(scope, inputs, outputs, Init::Uniform(bound))
    }

    pub fn zeros(scope: &Scope, inputs: usize, outputs: usize) -> Result<Self> {
        Self::with_init(scope, inputs, outputs, Init::Zeros)
    }

    pub fn with_init(scope: &Scope, inputs: usize, outputs: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: scope.get(&[outputs, inputs], "weight", init)?,
            bias: scope.get(&[outputs], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.get(&[dim], "weight", Init::Ones)?,
            beta: scope.get(&[dim], "bias", Init::Zeros)?,
            eps: Self::EPS,
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

/// Two-layer feed-forward block with ReLU.
#[derive(Clone, Debug)]
pub struct Ffn {
    up: Linear,
    down: Linear,
}

impl Ffn {
    pub fn new(scope: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&scope.pp("up"), dim, hidden)?,
            down: Linear::new(&scope.pp("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Small MLP with ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(scope: &Scope, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&scope.pp(format!("{i}")), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Multi-head scaled dot-product attention with projections.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must divide into heads");
        let bound = (6.0 / (2 * dim) as f64).sqrt();
        let mk = |n: &str| Linear::with_init(&scope.pp(n), dim, dim, Init::Uniform(bound));
        Ok(Self {
            q: mk("q")?,
            k: mk("k")?,
            v: mk("v")?,
            o: mk("o")?,
            heads,
            dim,
        })
    }

    /// `query (n, E)`, `key`/`value (m, E)`, optional additive `bias`
    /// broadcastable to `(n, m)`. Returns the output and the attention
    /// weights `(heads, n, m)`.
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (n, _) = query.dims2()?;
        let (m, _) = key.dims2()?;
        let dh = self.dim / self.heads;
        let split = |x: Tensor, len: usize| -> Result<Tensor> {
            Ok(x.reshape((len, self.heads, dh))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, n)?;
        let k = split(self.k.forward(key)?, m)?;
        let v = split(self.v.forward(value)?, m)?;
        let mut scores = (q.matmul(&k.transpose(1, 2)?)? / (dh as f64).sqrt())?;
        if let Some(b) = bias {
            scores = scores.broadcast_add(b)?;
        }
        let weights = softmax_last(&scores)?;
        let out = weights
            .matmul(&v)?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((n, self.dim))?;
        Ok((self.o.forward(&out)?, weights))
    }

    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, key, value, bias)?.0)
    }
}

/// Inverse of the logistic function, clamped away from 0 and 1.
pub fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let x = x.clamp(EPS, 1.0 - EPS)?;
    let one_minus = x.affine(-1.0, 1.0)?;
    Ok((x.log()? - one_minus.log()?)?)
}

pub fn inverse_sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(1e-5, 1.0 - 1e-5);
    (x / (1.0 - x)).ln()
}

/// Sine/cosine embedding of `(n, 2)` normalized points into `dim` channels.
pub fn sine_embedding(points: &[[f64; 2]], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    assert!(dim.is_multiple_of(4), "embedding width must be a multiple of 4");
    let per_axis = dim / 2;
    let temperature: f64 = 10_000.0;
    let mut data = Vec::with_capacity(points.len() * dim);
    for p in points {
        for &coord in p {
            let x = coord * std::f64::consts::TAU;
            for i in 0..per_axis / 2 {
                let freq = temperature.powf(2.0 * i as f64 / per_axis as f64);
                data.push((x / freq).sin());
                data.push((x / freq).cos());
            }
        }
    }
    Ok(Tensor::from_vec(data, (points.len(), dim), device)?.to_dtype(dtype)?)
}

/// Reads a 2-D tensor into rows of `f64`.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_is_seeded() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let la = Linear::new(&a.root().pp("l"), 4, 3).unwrap();
        let lb = Linear::new(&b.root().pp("l"), 4, 3).unwrap();
        let x = Tensor::ones((2, 4), DType::F32, &Device::Cpu).unwrap();
        let ya = to_rows(&la.forward(&x).unwrap()).unwrap();
        let yb = to_rows(&lb.forward(&x).unwrap()).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(a.num_parameters(), 15);
    }

    #[test]
    fn layer_norm_normalizes() {
        let s = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&s.root(), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = to_rows(&ln.forward(&x).unwrap()).unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn masked_attention_selects_survivor() {
        let s = ParamStore::new(1, DType::F64);
        let att = Attention::new(&s.root(), 8, 2).unwrap();
        let q = Tensor::randn(0.0f64, 1.0, (3, 8), &Device::Cpu).unwrap();
        let kv = Tensor::randn(0.0f64, 1.0, (5, 8), &Device::Cpu).unwrap();
        let mut bias = vec![MASK_VALUE; 5];
        bias[2] = 0.0;
        let bias = Tensor::from_vec(bias, (1, 5), &Device::Cpu).unwrap();
        let (_, w) = att.forward_with_weights(&q, &kv, &kv, Some(&bias)).unwrap();
        let w = w.to_vec3::<f64>().unwrap();
        for head in w {
            for row in head {
                assert!((row[2] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let x = Tensor::new(&[[0.5f64, -1.0, 2.0]], &Device::Cpu).unwrap();
        let a = to_rows(&log_softmax_last(&x).unwrap().exp().unwrap()).unwrap();
        let b = to_rows(&softmax_last(&x).unwrap()).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_sigmoid_round_trip() {
        let x = Tensor::new(&[0.1f64, 0.5, 0.9], &Device::Cpu).unwrap();
        let y = candle_nn::ops::sigmoid(&inverse_sigmoid(&x).unwrap()).unwrap();
        let y = y.to_vec1::<f64>().unwrap();
        assert!((y[0] - 0.1).abs() < 1e-9 && (y[2] - 0.9).abs() < 1e-9);
        assert!((inverse_sigmoid_scalar(0.5)).abs() < 1e-12);
    }
}
