//! Optimal-transport conditional flow matching: the linear probability
//! path, the regression loss, the vector-field decoder and a fixed-step ODE
//! sampler with an optional guidance hook.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    apply_mask, sinusoidal_scalar, Conv1d, Init, Linear, ParamStore, StyleLayerNorm, TransformerLayer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub ode_steps: usize,
    pub solver: Solver,
    /// Scale of the starting noise at sampling time.
    pub temperature: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            ode_steps: 10,
            solver: Solver::Euler,
            temperature: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !self.sigma_min.is_finite() {
            return Err(Error::Config(format!("sigma_min ({}) must be positive", self.sigma_min)));
        }
        if self.ode_steps == 0 {
            return Err(Error::Config("ode_steps must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature ({}) must be finite and >= 0", self.temperature)));
        }
        Ok(())
    }
}

/// Point on the conditional path and its target velocity:
/// `phi = (1 - (1 - s) t) x0 + t m`, `u = m - (1 - s) x0`.
///
/// `t` is one time per leading-axis example.
pub fn sample_path(x0: &Tensor, m: &Tensor, t: &Tensor, sigma_min: f64) -> Result<(Tensor, Tensor)> {
    if x0.dims() != m.dims() {
        return Err(Error::Shape(format!("x0 {:?} vs target {:?}", x0.dims(), m.dims())));
    }
    let b = x0.dim(0)?;
    if t.dims() != [b] {
        return Err(Error::Shape(format!("{:?} times for batch {b}", t.dims())));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let t = t.reshape(shape)?;
    let keep = ((t.clone() * -(1.0 - sigma_min))? + 1.0)?;
    let phi = (x0.broadcast_mul(&keep)? + m.broadcast_mul(&t)?)?;
    let u = (m - (x0 * (1.0 - sigma_min))?)?;
    Ok((phi, u))
}

/// Scalar form of [`sample_path`].
pub fn sample_path_scalar(x0: f64, m: f64, t: f64, sigma_min: f64) -> (f64, f64) {
    ((1.0 - (1.0 - sigma_min) * t) * x0 + t * m, m - (1.0 - sigma_min) * x0)
}

/// A learned or analytic velocity field `v(x, t | mu, style)`.
pub trait VectorField {
    /// `x`, `mu`: `(B, M, d_a)`; `t`: `(B,)`; `style`: `(B, d_s)`;
    /// `mask`: `(B, M)`.
    fn velocity(&self, x: &Tensor, t: &Tensor, mu: &Tensor, style: &Tensor, mask: &Tensor) -> Result<Tensor>;
}

/// Replaces the field at each solver evaluation.
pub trait GuidanceHook {
    fn guide(&self, v: &Tensor, x: &Tensor, t: f64, mask: &Tensor) -> Result<Tensor>;
}

/// Standard-normal noise of shape `(rows, cols)` from one seed.
pub fn seeded_noise(seed: u64, rows: usize, cols: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub struct CfmLoss {
    pub loss: Tensor,
    pub t: Vec<f64>,
}

/// Flow-matching regression loss over valid mel entries with one uniform
/// `t` and fresh Gaussian noise per example.
pub fn cfm_loss(
    field: &dyn VectorField,
    mu: &Tensor,
    mel: &Tensor,
    style: &Tensor,
    mask: &Tensor,
    sigma_min: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CfmLoss> {
    if mu.dims() != mel.dims() {
        return Err(Error::Shape(format!("mu {:?} vs mel {:?}", mu.dims(), mel.dims())));
    }
    let (b, m, d) = mel.dims3()?;
    let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let noise: Vec<f32> = (0..b * m * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let dtype = mel.dtype();
    let x0 = Tensor::from_vec(noise, (b, m, d), mel.device())?.to_dtype(dtype)?;
    let x0 = apply_mask(&x0, mask)?;
    let t_tensor = Tensor::new(t.as_slice(), mel.device())?.to_dtype(dtype)?;
    let (phi, u) = sample_path(&x0, mel, &t_tensor, sigma_min)?;
    let v = field.velocity(&phi, &t_tensor, mu, style, mask)?;
    let se = apply_mask(&(v - u)?.sqr()?, mask)?.sum_all()?;
    let count = (mask.sum_all()? * d as f64)?;
    let loss = (se / count)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    Ok(CfmLoss { loss, t })
}

/// Integrates the field from `t = 0` to `1` starting at seeded noise, one
/// seed per batch element.
#[allow(clippy::too_many_arguments)]
pub fn ode_sample(
    field: &dyn VectorField,
    mu: &Tensor,
    style: &Tensor,
    mask: &Tensor,
    config: &FlowConfig,
    hook: Option<&dyn GuidanceHook>,
    seeds: &[u64],
    lengths: &[usize],
) -> Result<Tensor> {
    config.validate()?;
    let (b, m, d) = mu.dims3()?;
    if seeds.len() != b || lengths.len() != b {
        return Err(Error::Shape(format!(
            "{} seeds and {} lengths for batch {b}",
            seeds.len(),
            lengths.len()
        )));
    }
    let mut noise = vec![0f32; b * m * d];
    for (i, (&seed, &len)) in seeds.iter().zip(lengths).enumerate() {
        let rows = len.min(m);
        noise[i * m * d..i * m * d + rows * d].copy_from_slice(&seeded_noise(seed, rows, d));
    }
    if config.temperature != 1.0 {
        let scale = config.temperature as f32;
        noise.iter_mut().for_each(|v| *v *= scale);
    }
    let x0 = Tensor::from_vec(noise, (b, m, d), mu.device())?.to_dtype(mu.dtype())?;
    integrate(field, x0, mu, style, mask, config, hook)
}

/// Fixed-step integration from a given starting state.
pub fn integrate(
    field: &dyn VectorField,
    x0: Tensor,
    mu: &Tensor,
    style: &Tensor,
    mask: &Tensor,
    config: &FlowConfig,
    hook: Option<&dyn GuidanceHook>,
) -> Result<Tensor> {
    config.validate()?;
    let b = x0.dim(0)?;
    let dt = 1.0 / config.ode_steps as f64;
    let eval = |x: &Tensor, t: f64| -> Result<Tensor> {
        let tt = Tensor::full(t, b, x.device())?.to_dtype(x.dtype())?;
        let v = field.velocity(x, &tt, mu, style, mask)?.detach();
        match hook {
            Some(h) => Ok(h.guide(&v, x, t, mask)?.detach()),
            None => Ok(v),
        }
    };
    let mut x = x0;
    for step in 0..config.ode_steps {
        let t = step as f64 * dt;
        let v = match config.solver {
            Solver::Euler => eval(&x, t)?,
            Solver::Midpoint => {
                let v1 = eval(&x, t)?;
                let mid = (&x + (v1 * (dt / 2.0))?)?;
                eval(&mid, t + dt / 2.0)?
            }
        };
        x = apply_mask(&(&x + (v * dt)?)?, mask)?.detach();
        let finite = x
            .to_dtype(DType::F64)?
            .abs()?
            .sum_all()?
            .to_scalar::<f64>()?
            .is_finite();
        if !finite {
            return Err(Error::Divergence { step });
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            blocks: 4,
            heads: 4,
            kernel: 3,
        }
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            blocks: 3,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm: StyleLayerNorm,
    conv: Conv1d,
    time: Linear,
    layer: TransformerLayer,
}

/// Convolution and attention blocks over time, conditioned on `t` through a
/// sinusoidal embedding, on `mu` by input concatenation and on the speaker
/// style through per-block affine normalisation.
#[derive(Debug, Clone)]
pub struct FlowDecoder {
    input: Linear,
    time_mlp: (Linear, Linear),
    blocks: Vec<DecoderBlock>,
    output: Linear,
    hidden: usize,
}

impl FlowDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, n_mels: usize, d_style: usize, c: &DecoderConfig) -> Result<Self> {
        let h = c.hidden;
        let blocks = (0..c.blocks)
            .map(|i| -> Result<DecoderBlock> {
                let n = format!("{name}.block{i}");
                Ok(DecoderBlock {
                    norm: StyleLayerNorm::new(ps, &format!("{n}.norm"), d_style, h)?,
                    conv: Conv1d::new(ps, &format!("{n}.conv"), h, h, c.kernel)?,
                    time: Linear::new(ps, &format!("{n}.time"), h, h)?,
                    layer: TransformerLayer::new(ps, &format!("{n}.layer"), h, c.heads, 2 * h, Some(d_style))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Linear::new(ps, &format!("{name}.input"), 2 * n_mels, h)?,
            time_mlp: (
                Linear::new(ps, &format!("{name}.time1"), h, h)?,
                Linear::new(ps, &format!("{name}.time2"), h, h)?,
            ),
            blocks,
            output: Linear::with_init(
                ps,
                &format!("{name}.output"),
                h,
                n_mels,
                Init::Uniform(0.1 / (h as f64).sqrt()),
                true,
            )?,
            hidden: h,
        })
    }
}

impl VectorField for FlowDecoder {
    fn velocity(&self, x: &Tensor, t: &Tensor, mu: &Tensor, style: &Tensor, mask: &Tensor) -> Result<Tensor> {
        if x.dims() != mu.dims() {
            return Err(Error::Shape(format!("state {:?} vs mu {:?}", x.dims(), mu.dims())));
        }
        let temb = sinusoidal_scalar(t, self.hidden, 1000.0)?;
        let temb = self.time_mlp.1.forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;
        let mut h = apply_mask(&self.input.forward(&Tensor::cat(&[x, mu], 2)?)?, mask)?;
        for block in &self.blocks {
            let tb = block.time.forward(&temb.silu()?)?.unsqueeze(1)?;
            let c = block.conv.forward(&apply_mask(&block.norm.forward(&h, style)?, mask)?)?;
            h = apply_mask(&(h + c.silu()?.broadcast_add(&tb)?)?, mask)?;
            h = block.layer.forward(&h, mask, Some(style))?;
        }
        apply_mask(&self.output.forward(&h)?, mask)
    }
}

/// Closed-form marginal field carrying standard normal noise to the scalar
/// Gaussian `N(mean, std^2)` along the conditional path.
#[derive(Debug, Clone, Copy)]
pub struct GaussianField {
    pub mean: f64,
    pub std: f64,
    pub sigma_min: f64,
}

impl GaussianField {
    pub fn at(&self, x: f64, t: f64) -> f64 {
        let a = 1.0 - (1.0 - self.sigma_min) * t;
        let var = a * a + t * t * self.std * self.std;
        self.mean + (t * self.std * self.std - (1.0 - self.sigma_min) * a) * (x - t * self.mean) / var
    }
}

impl VectorField for GaussianField {
    fn velocity(&self, x: &Tensor, t: &Tensor, _mu: &Tensor, _style: &Tensor, _mask: &Tensor) -> Result<Tensor> {
        let ts = t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let t = ts.first().copied().unwrap_or(0.0);
        let xs = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let v: Vec<f64> = xs.iter().map(|&xi| self.at(xi, t)).collect();
        Ok(Tensor::from_vec(v, x.dims(), &Device::Cpu)?.to_dtype(x.dtype())?)
    }
}
