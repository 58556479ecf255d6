//! Small transformer building blocks over `candle_core` with named,
//! seeded parameters.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const NEG_INF: f32 = -1e9;

pub enum Init {
    /// Normal(0, std) truncated to ±2 std.
    TruncNormal(f64),
    Const(f32),
}

/// Named trainable parameters, ordered by name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        assert!(!self.vars.contains_key(name), "parameter `{name}` defined twice");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("std is positive");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                    .collect()
            }
        };
        let var = Var::from_vec(data, shape, &self.device)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat copies of every parameter.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), (v.dims().to_vec(), v.flatten_all()?.to_vec1::<f32>()?))))
            .collect()
    }

    /// Overwrites parameters in place. Every parameter must be present with
    /// the right shape.
    pub fn import(&self, weights: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (name, var) in &self.vars {
            let (shape, data) = weights
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter `{name}`")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::WeightShapeMismatch {
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: shape.clone(),
                });
            }
            var.set(&Tensor::from_slice(data, shape.as_slice(), &self.device)?)?;
        }
        Ok(())
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean softmax cross-entropy of `logits` (N, C) against class ids, over
/// rows whose `weights` entry is non-zero (all rows when `weights` is None).
pub fn cross_entropy(logits: &Tensor, targets: &[u32], weights: Option<&[f32]>) -> Result<Tensor> {
    let n = targets.len();
    let logp = log_softmax_last(logits)?;
    let idx = Tensor::from_slice(targets, (n, 1), logits.device())?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    match weights {
        None => Ok(picked.neg()?.mean_all()?),
        Some(w) => {
            let total: f32 = w.iter().sum();
            let wt = Tensor::from_slice(w, n, logits.device())?;
            Ok((picked.mul(&wt)?.sum_all()?.neg()? / total as f64)?)
        }
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.affine(1.0, 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let w = ps.param(&format!("{name}.weight"), &[din, dout], Init::TruncNormal(INIT_STD))?;
        let b = if bias {
            Some(ps.param(&format!("{name}.bias"), &[dout], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().expect("input has at least one dim");
        let rows = x.elem_count() / din;
        let y = x.reshape((rows, din))?.matmul(&self.w)?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&var.affine(1.0, LN_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        assert_eq!(dim % heads, 0, "width must divide into heads");
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(ps, &format!("{name}.k"), kv_dim, dim, true)?,
            v: Linear::new(ps, &format!("{name}.v"), kv_dim, dim, true)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    /// `mask` is additive and broadcastable to (B, H, Lq, Lk).
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, dim) = xq.dims3()?;
        let lk = xkv.dim(1)?;
        let hd = dim / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(xq)?, lq)?;
        let k = split(self.k.forward(xkv)?, lk)?;
        let v = split(self.v.forward(xkv)?, lk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, dim))?;
        self.o.forward(&ctx)
    }
}

/// Pre-norm transformer layer with optional cross-attention.
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        cross_dim: Option<usize>,
    ) -> Result<Self> {
        let cross = match cross_dim {
            Some(kv) => Some((
                LayerNorm::new(ps, &format!("{name}.ln_cross"), dim)?,
                Attention::new(ps, &format!("{name}.cross_attn"), dim, kv, heads)?,
            )),
            None => None,
        };
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, dim, heads)?,
            cross,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, dim * mlp_ratio, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim * mlp_ratio, dim, true)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_mask: Option<&Tensor>,
        enc: Option<(&Tensor, Option<&Tensor>)>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let mut x = (x + self.attn.forward(&h, &h, self_mask)?)?;
        if let (Some((ln, attn)), Some((enc, enc_mask))) = (&self.cross, enc) {
            x = (&x + attn.forward(&ln.forward(&x)?, enc, enc_mask)?)?;
        }
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.relu()?)?;
        Ok((x + h)?)
    }
}

/// Additive key-padding mask (B, 1, 1, L): 0 where `valid`, large negative elsewhere.
pub fn padding_mask(valid: &[Vec<bool>], device: &Device) -> Result<Tensor> {
    let b = valid.len();
    let l = valid.first().map(Vec::len).unwrap_or(0);
    let data: Vec<f32> = valid
        .iter()
        .flat_map(|row| row.iter().map(|&v| if v { 0.0 } else { NEG_INF }))
        .collect();
    Ok(Tensor::from_vec(data, (b, 1, 1, l), device)?)
}

/// Additive causal mask (1, 1, L, L).
pub fn causal_mask(l: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..l)
        .flat_map(|i| (0..l).map(move |j| if j <= i { 0.0 } else { NEG_INF }))
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, l, l), device)?)
}

/// Value of a single-element tensor of any rank.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.squeeze(0)?.to_scalar::<f64>()?)
}
