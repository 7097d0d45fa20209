//! Parameter storage, optimizer and the layers the pipeline is built from.
//!
//! Sequences are laid out `(batch, time, features)`. Padding masks are
//! `(batch, time)` tensors holding 1 for valid positions and 0 for padding.
//! Parameters are initialised from a ChaCha stream keyed by
//! `(seed, parameter name)`, so initialisation does not depend on
//! construction order.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{ArrayData, ArrayFile, NamedArray};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Named variables of one network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            seed,
            vars: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = name_rng(self.seed, name);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Trainable parameter `name`, created on first use.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let var = Var::from_tensor(&self.init_tensor(name, shape, init)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// Non-trainable state such as running statistics.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.buffers.get(name) {
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.init_tensor(name, shape, init)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites one trainable parameter (test and diagnostic use).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name).or_else(|| self.buffers.get(name))
    }

    /// Shapes of every stored array, keyed by name.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.vars
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn export(&self, prefix: &str, file: &mut ArrayFile) -> Result<()> {
        for (name, var) in self.vars.iter().chain(self.buffers.iter()) {
            file.insert(format!("{prefix}{name}"), tensor_to_array(var.as_tensor())?);
        }
        Ok(())
    }

    /// Loads every parameter and buffer; names and shapes must match.
    pub fn import(&self, prefix: &str, file: &ArrayFile) -> Result<()> {
        for (name, var) in self.vars.iter().chain(self.buffers.iter()) {
            let array = file.get(&format!("{prefix}{name}"))?;
            let t = array_to_tensor(array, &self.device)?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "{name}: stored {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn tensor_to_array(t: &Tensor) -> Result<NamedArray> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let data = match t.dtype() {
        DType::F64 => ArrayData::F64(flat.to_vec1::<f64>()?),
        DType::U32 => ArrayData::U32(flat.to_vec1::<u32>()?),
        _ => ArrayData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
    };
    Ok(NamedArray { shape, data })
}

pub fn array_to_tensor(a: &NamedArray, device: &Device) -> Result<Tensor> {
    Ok(match &a.data {
        ArrayData::F32(v) => Tensor::from_slice(v, a.shape.as_slice(), device)?,
        ArrayData::F64(v) => Tensor::from_slice(v, a.shape.as_slice(), device)?,
        ArrayData::U32(v) => Tensor::from_slice(v, a.shape.as_slice(), device)?,
    })
}

/// Adam with decoupled weight decay and explicit, serialisable state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update and returns the pre-clipping global gradient norm.
    pub fn step(
        &mut self,
        params: &ParamStore,
        grads: &GradStore,
        lr: f64,
        clip_norm: Option<f64>,
    ) -> Result<f64> {
        let mut sq = 0.0;
        let mut present = Vec::new();
        for (name, var) in params.trainable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.detach();
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                present.push((name, var, g));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var, g) in present {
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let current = var.as_tensor().detach();
            let mut next = (&current - (update * lr)?)?;
            if self.weight_decay > 0.0 {
                next = (next - (current * (lr * self.weight_decay))?)?;
            }
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(norm)
    }

    pub fn export(&self, prefix: &str, file: &mut ArrayFile) -> Result<()> {
        for (name, m) in &self.first {
            file.insert(format!("{prefix}m.{name}"), tensor_to_array(m)?);
        }
        for (name, v) in &self.second {
            file.insert(format!("{prefix}v.{name}"), tensor_to_array(v)?);
        }
        file.metadata.insert(format!("{prefix}step"), self.step.to_string());
        Ok(())
    }

    pub fn import(&mut self, prefix: &str, file: &ArrayFile, dtype: DType) -> Result<()> {
        self.first.clear();
        self.second.clear();
        for (key, array) in &file.arrays {
            let Some(rest) = key.strip_prefix(prefix) else {
                continue;
            };
            let t = array_to_tensor(array, &Device::Cpu)?.to_dtype(dtype)?;
            if let Some(name) = rest.strip_prefix("m.") {
                self.first.insert(name.to_string(), t);
            } else if let Some(name) = rest.strip_prefix("v.") {
                self.second.insert(name.to_string(), t);
            }
        }
        self.step = file
            .metadata
            .get(&format!("{prefix}step"))
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// functional helpers

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

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Multiplies `(B, T, C)` by a `(B, T)` mask.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&mask.unsqueeze(D::Minus1)?)?)
}

/// `(B, max_len)` mask with ones on the first `lengths[b]` positions.
pub fn length_mask(lengths: &[usize], max_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&l| (0..max_len).map(move |i| if i < l { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), max_len), device)?.to_dtype(dtype)?)
}

/// Sinusoidal position table, `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data[pos * dim + i] = (pos as f64 * freq).sin();
            data[pos * dim + half + i] = (pos as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of per-example scalars `t: (B,)`, `(B, dim)`.
pub fn sinusoidal_scalar(t: &Tensor, dim: usize, scale: f64) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = (t.unsqueeze(1)? * scale)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[&args.sin()?, &args.cos()?], 1)?)
}

// ---------------------------------------------------------------------------
// layers

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(ps, name, d_in, d_out, Init::Uniform(bound), true)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[d_in, d_out], init)?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("scalar into linear".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Copy whose tensors are detached from the autograd graph.
    pub fn frozen(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(|b| b.detach()),
        }
    }
}

fn normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize(x, 1e-5)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Scale and shift projected from a style vector: `x * (1 + s(style)) + b(style)`.
///
/// Projection biases start at zero, so a zero style vector leaves `x`
/// untouched.
#[derive(Debug, Clone)]
pub struct StyleModulation {
    scale: Linear,
    shift: Linear,
}

impl StyleModulation {
    pub fn new(ps: &mut ParamStore, name: &str, d_style: usize, dim: usize) -> Result<Self> {
        let init = Init::Normal(0.5 / (d_style as f64).sqrt());
        Ok(Self {
            scale: Linear::with_init(ps, &format!("{name}.scale"), d_style, dim, init, true)?,
            shift: Linear::with_init(ps, &format!("{name}.shift"), d_style, dim, init, true)?,
        })
    }

    /// `x: (B, T, C)`, `style: (B, S)`.
    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let scale = (self.scale.forward(style)? + 1.0)?.unsqueeze(1)?;
        let shift = self.shift.forward(style)?.unsqueeze(1)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Layer normalisation whose affine parameters come from the style vector.
#[derive(Debug, Clone)]
pub struct StyleLayerNorm {
    modulation: StyleModulation,
}

impl StyleLayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d_style: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            modulation: StyleModulation::new(ps, name, d_style, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        self.modulation.forward(&normalize(x, 1e-5)?, style)
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Plain(LayerNorm),
    Style(StyleLayerNorm),
}

impl Norm {
    pub fn forward(&self, x: &Tensor, style: Option<&Tensor>) -> Result<Tensor> {
        match (self, style) {
            (Norm::Plain(n), _) => n.forward(x),
            (Norm::Style(n), Some(s)) => n.forward(x, s),
            (Norm::Style(_), None) => Err(Error::Invalid("style-conditioned norm needs a style".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.silu()?)
    }
}

/// Output of [`MultiHeadAttention::forward`].
#[derive(Debug, Clone)]
pub struct Attended {
    /// `(B, Tq, D)`.
    pub context: Tensor,
    /// Head-averaged weights, `(B, Tq, Tk)`; rows sum to one.
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn attend(&self, query: &Tensor, memory: &Tensor, key_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, tq, d) = query.dims3()?;
        let (bm, tk, dm) = memory.dims3()?;
        if b != bm || d != dm {
            return Err(Error::Shape(format!(
                "query {:?} vs memory {:?}",
                query.dims(),
                memory.dims()
            )));
        }
        let dh = d / self.heads;
        let q = self.split(&(self.q.forward(query)? / (dh as f64).sqrt())?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let mut scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        if let Some(mask) = key_mask {
            let bias = ((mask.reshape((b, 1, 1, tk))? - 1.0)? * 1e9)?;
            scores = scores.broadcast_add(&bias)?;
        }
        let w = softmax_last(&scores)?;
        let ctx = w
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        Ok((self.o.forward(&ctx)?, w))
    }

    /// Scaled dot-product attention of `query: (B, Tq, D)` over
    /// `memory: (B, Tk, D)`; `key_mask: (B, Tk)` excludes padded keys.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, key_mask: Option<&Tensor>) -> Result<Attended> {
        let (context, w) = self.attend(query, memory, key_mask)?;
        Ok(Attended {
            context,
            weights: w.mean(1)?,
        })
    }

    /// As [`Self::forward`], without materialising the weights.
    pub fn context(&self, query: &Tensor, memory: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.attend(query, memory, key_mask)?.0)
    }

    /// Attention replaced by the identity matrix: each position only sees
    /// itself.
    pub fn forward_identity(&self, x: &Tensor) -> Result<Tensor> {
        self.o.forward(&self.v.forward(x)?)
    }
}

/// Pre-norm transformer layer; optionally style-conditioned normalisation.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm_attn: Norm,
    attn: MultiHeadAttention,
    norm_ff: Norm,
    ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        d_style: Option<usize>,
    ) -> Result<Self> {
        let norm = |ps: &mut ParamStore, n: &str| -> Result<Norm> {
            Ok(match d_style {
                Some(s) => Norm::Style(StyleLayerNorm::new(ps, &format!("{name}.{n}"), s, dim)?),
                None => Norm::Plain(LayerNorm::new(ps, &format!("{name}.{n}"), dim)?),
            })
        };
        Ok(Self {
            norm_attn: norm(ps, "norm_attn")?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm_ff: norm(ps, "norm_ff")?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff_hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor, style: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm_attn.forward(x, style)?;
        let x = (x + self.attn.context(&h, &h, Some(mask))?)?;
        let h = self.norm_ff.forward(&x, style)?;
        let x = (&x + self.ff.forward(&h)?)?;
        apply_mask(&x, mask)
    }

    /// Same layer with the attention matrix ablated to the identity.
    pub fn forward_local(&self, x: &Tensor, mask: &Tensor, style: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm_attn.forward(x, style)?;
        let x = (x + self.attn.forward_identity(&h)?)?;
        let h = self.norm_ff.forward(&x, style)?;
        let x = (&x + self.ff.forward(&h)?)?;
        apply_mask(&x, mask)
    }
}

/// Dense 1-D convolution over time with "same" zero padding, computed as a
/// matrix product over stacked shifted copies of the input.
#[derive(Debug, Clone)]
pub struct Conv1d {
    proj: Linear,
    kernel: usize,
}

impl Conv1d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel {kernel} must be odd")));
        }
        Ok(Self {
            proj: Linear::new(ps, name, c_in * kernel, c_out)?,
            kernel,
        })
    }

    /// `x: (B, T, C_in)` with padding already zeroed.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&unfold_time(x, self.kernel)?)
    }

    pub fn frozen(&self) -> Self {
        Self {
            proj: self.proj.frozen(),
            kernel: self.kernel,
        }
    }
}

fn unfold_time(x: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel == 1 {
        return Ok(x.clone());
    }
    let t = x.dim(1)?;
    let pad = kernel / 2;
    let xp = x.pad_with_zeros(1, pad, pad)?;
    let shifted = (0..kernel)
        .map(|i| xp.narrow(1, i, t))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&shifted, 2)?)
}

/// Per-channel convolution over time.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel {kernel} must be odd")));
        }
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[kernel, channels], Init::Uniform(bound))?,
            bias: ps.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let pad = self.kernel / 2;
        let xp = x.pad_with_zeros(1, pad, pad)?;
        let mut acc: Option<Tensor> = None;
        for i in 0..self.kernel {
            let term = xp.narrow(1, i, t)?.broadcast_mul(&self.weight.get(i)?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        Ok(acc.unwrap().broadcast_add(&self.bias)?)
    }
}

/// 3x3 convolution over `(B, H, W, C)` feature maps, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv2d3x3 {
    proj: Linear,
    c_in: usize,
    c_out: usize,
}

impl Conv2d3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, name, 9 * c_in, c_out)?,
            c_in,
            c_out,
        })
    }

    /// `x: (B, H, W, C_in)` to `(B, H, W, C_out)`, zero padding.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        if self.c_in <= self.c_out {
            let xp = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
            let mut taps = Vec::with_capacity(9);
            for dy in 0..3 {
                let row = xp.narrow(1, dy, h)?;
                for dx in 0..3 {
                    taps.push(row.narrow(2, dx, w)?);
                }
            }
            return self.proj.forward(&Tensor::cat(&taps, 3)?);
        }
        // project every tap first, then shift and add the narrower outputs
        let weight = self
            .proj
            .weight()
            .reshape((9, self.c_in, self.c_out))?
            .transpose(0, 1)?
            .reshape((self.c_in, 9 * self.c_out))?;
        let z = x.reshape((b * h * w, self.c_in))?.matmul(&weight)?.reshape((b, h, w, 9 * self.c_out))?;
        let zp = z.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut out: Option<Tensor> = None;
        for dy in 0..3 {
            let row = zp.narrow(1, dy, h)?;
            for dx in 0..3 {
                let tap = row.narrow(2, dx, w)?.narrow(3, (dy * 3 + dx) * self.c_out, self.c_out)?;
                out = Some(match out {
                    Some(acc) => (acc + tap)?,
                    None => tap,
                });
            }
        }
        let out = out.expect("nine taps");
        match self.proj.bias() {
            Some(bias) => Ok(out.broadcast_add(bias)?),
            None => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d <= tol, "max abs diff {d}");
    }

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::new(DType::F64, 3);
        let mut b = ParamStore::new(DType::F64, 3);
        let a1 = a.param("x", &[4], Init::Normal(1.0)).unwrap();
        let _ = a.param("y", &[4], Init::Normal(1.0)).unwrap();
        let _ = b.param("y", &[4], Init::Normal(1.0)).unwrap();
        let b1 = b.param("x", &[4], Init::Normal(1.0)).unwrap();
        assert_close(&a1, &b1, 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap();
        assert_close(&s, &Tensor::new(&[1.0f64, 1.0], &Device::Cpu).unwrap(), 1e-12);
        let ls = log_softmax_last(&x).unwrap().exp().unwrap();
        assert_close(&ls, &softmax_last(&x).unwrap(), 1e-12);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let conv = Conv1d::new(&mut ps, "c", 2, 1, 3).unwrap();
        let x = Tensor::new(&[[[1.0f64, 0.0], [2.0, -1.0], [0.5, 3.0]]], &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // weight rows are ordered (tap, channel)
        let w = ps.get("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = [[0.0, 0.0], [1.0, 0.0], [2.0, -1.0], [0.5, 3.0], [0.0, 0.0]];
        for t in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                for c in 0..2 {
                    acc += w[k * 2 + c] * xs[t + k][c];
                }
            }
            assert!((acc - y[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_ignores_padded_keys() {
        let mut ps = ParamStore::new(DType::F64, 1);
        let mha = MultiHeadAttention::new(&mut ps, "a", 4, 2).unwrap();
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let kv = Tensor::randn(0f64, 1.0, (1, 2, 4), &dev).unwrap();
        let pad = Tensor::randn(0f64, 1.0, (1, 1, 4), &dev).unwrap();
        let kv_padded = Tensor::cat(&[&kv, &pad], 1).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &dev).unwrap();
        let a = mha.forward(&q, &kv, None).unwrap();
        let b = mha.forward(&q, &kv_padded, Some(&mask)).unwrap();
        assert_close(&a.context, &b.context, 1e-12);
        assert_close(&a.weights, &b.weights.narrow(2, 0, 2).unwrap(), 1e-12);
    }

    #[test]
    fn zero_style_modulation_is_identity() {
        let mut ps = ParamStore::new(DType::F64, 2);
        let m = StyleModulation::new(&mut ps, "m", 3, 4).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 4), &Device::Cpu).unwrap();
        let s = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert_close(&m.forward(&x, &s).unwrap(), &x, 0.0);
    }

    #[test]
    fn adam_state_round_trips() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let w = ps.param("w", &[3], Init::Normal(1.0)).unwrap();
        let loss = w.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::default();
        opt.step(&ps, &grads, 0.1, None).unwrap();
        let mut file = ArrayFile::default();
        opt.export("opt.", &mut file).unwrap();
        let mut back = Adam::default();
        back.import("opt.", &file, DType::F32).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.first.len(), 1);
    }

    #[test]
    fn conv2d_paths_match_direct_sum() {
        for (c_in, c_out) in [(1, 3), (3, 1), (4, 2)] {
            let mut ps = ParamStore::new(DType::F64, 7);
            let conv = Conv2d3x3::new(&mut ps, "c", c_in, c_out).unwrap();
            ps.set("c.bias", &Tensor::new(&[0.3f64, -0.2, 0.1][..c_out], &Device::Cpu).unwrap()).unwrap();
            let (b, h, w) = (2, 4, 5);
            let x = Tensor::randn(0f64, 1.0, (b, h, w, c_in), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let wt = conv.proj.weight().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let bias = conv.proj.bias().unwrap().to_vec1::<f64>().unwrap();
            for n in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        for o in 0..c_out {
                            let mut acc = bias[o];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (yy, xx) = (i as isize + dy as isize - 1, j as isize + dx as isize - 1);
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    for c in 0..c_in {
                                        let xv = xs[((n * h + yy as usize) * w + xx as usize) * c_in + c];
                                        acc += xv * wt[((dy * 3 + dx) * c_in + c) * c_out + o];
                                    }
                                }
                            }
                            let got = y[((n * h + i) * w + j) * c_out + o];
                            assert!((got - acc).abs() < 1e-12, "{c_in}->{c_out}: {got} vs {acc}");
                        }
                    }
                }
            }
        }
    }
}
