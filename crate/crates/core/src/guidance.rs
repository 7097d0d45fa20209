//! Emotion classifier over noisy mel states, positive/negative guidance of
//! the sampling field, and the intensity score.

use candle_core::{DType, Tensor, Var, D};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::MelBatch;
use crate::error::{Error, Result};
use crate::flow::{sample_path, GuidanceHook};
use crate::nn::{apply_mask, leaky_relu, log_softmax_last, softmax_last, Adam, Conv1d, Init, Linear, ParamStore};
use crate::types::{CorpusSample, EmotionInstruction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 6,
            kernel: 5,
            dropout: 0.1,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct MaskedBatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl MaskedBatchNorm {
    fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: ps.param(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: ps.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: ps.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
        })
    }

    /// Statistics over valid `(batch, time)` positions in training; running
    /// estimates otherwise.
    fn forward(&self, x: &Tensor, mask: &Tensor, train: Option<f64>) -> Result<Tensor> {
        let (mean, var) = match train {
            Some(momentum) => {
                let m = mask.unsqueeze(D::Minus1)?;
                let count = mask.sum_all()?;
                let mean = x.broadcast_mul(&m)?.sum((0, 1))?.broadcast_div(&count)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.broadcast_mul(&m)?.sum((0, 1))?.broadcast_div(&count)?;
                let rm = ((self.running_mean.as_tensor() * (1.0 - momentum))? + (mean.detach() * momentum)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - momentum))? + (var.detach() * momentum)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            None => (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            ),
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    fn frozen(&self) -> Result<Self> {
        Ok(Self {
            gamma: self.gamma.detach(),
            beta: self.beta.detach(),
            running_mean: Var::from_tensor(&self.running_mean.as_tensor().copy()?)?,
            running_var: Var::from_tensor(&self.running_var.as_tensor().copy()?)?,
        })
    }
}

/// Forward-pass mode: training uses batch statistics and seeded dropout.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

/// 1-D convolutional classifier with mel bins as channels and time as the
/// convolution axis; `t` enters as an extra constant channel.
#[derive(Debug, Clone)]
pub struct EmotionClassifier {
    convs: Vec<Conv1d>,
    norms: Vec<MaskedBatchNorm>,
    head: Linear,
    config: ClassifierConfig,
    n_classes: usize,
}

impl EmotionClassifier {
    pub fn new(ps: &mut ParamStore, n_mels: usize, n_classes: usize, config: ClassifierConfig) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {n_classes}")));
        }
        if config.layers == 0 {
            return Err(Error::Config("classifier needs at least one layer".into()));
        }
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..config.layers {
            let c_in = if i == 0 { n_mels + 1 } else { config.channels };
            convs.push(Conv1d::new(ps, &format!("classifier.conv{i}"), c_in, config.channels, config.kernel)?);
            norms.push(MaskedBatchNorm::new(ps, &format!("classifier.bn{i}"), config.channels)?);
        }
        Ok(Self {
            convs,
            norms,
            head: Linear::new(ps, "classifier.head", config.channels, n_classes)?,
            config,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Logits `(B, N)` for states `x: (B, M, d_a)` at times `t: (B,)`.
    pub fn logits(&self, x: &Tensor, t: &Tensor, mask: &Tensor, mut mode: Mode<'_>) -> Result<Tensor> {
        let (b, m, _) = x.dims3()?;
        if t.dims() != [b] || mask.dims() != [b, m] {
            return Err(Error::Shape(format!(
                "state {:?}, times {:?}, mask {:?}",
                x.dims(),
                t.dims(),
                mask.dims()
            )));
        }
        let t_channel = t.reshape((b, 1, 1))?.broadcast_as((b, m, 1))?.to_dtype(x.dtype())?;
        let mut h = apply_mask(&Tensor::cat(&[x, &t_channel], 2)?, mask)?;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(&h)?;
            let momentum = match mode {
                Mode::Train(_) => Some(self.config.bn_momentum),
                Mode::Eval => None,
            };
            h = leaky_relu(&norm.forward(&h, mask, momentum)?, self.config.leaky_slope)?;
            if let Mode::Train(ref mut rng) = mode {
                if self.config.dropout > 0.0 {
                    let keep = 1.0 - self.config.dropout;
                    let n = h.elem_count();
                    let drop: Vec<f32> = (0..n)
                        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
                        .collect();
                    let drop = Tensor::from_vec(drop, h.dims(), h.device())?.to_dtype(h.dtype())?;
                    h = (h * drop)?;
                }
            }
            h = apply_mask(&h, mask)?;
        }
        let pooled = h.sum(1)?.broadcast_div(&mask.sum_keepdim(1)?)?;
        self.head.forward(&pooled)
    }

    /// Evaluation-mode class probabilities, `(B, N)`.
    pub fn probs(&self, x: &Tensor, t: &Tensor, mask: &Tensor) -> Result<Tensor> {
        softmax_last(&self.logits(x, t, mask, Mode::Eval)?)
    }

    /// Copy whose parameters are constants, so gradients only reach the
    /// input.
    pub fn frozen(&self) -> Result<Self> {
        Ok(Self {
            convs: self.convs.iter().map(|c| c.frozen()).collect(),
            norms: self.norms.iter().map(|n| n.frozen()).collect::<Result<Vec<_>>>()?,
            head: self.head.frozen(),
            config: self.config.clone(),
            n_classes: self.n_classes,
        })
    }
}

/// Probabilities at a scalar time for a whole batch.
pub fn classifier_probs(psi: &EmotionClassifier, x: &Tensor, t: f64, mask: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("time {t} outside [0, 1]")));
    }
    let b = x.dim(0)?;
    let tt = Tensor::full(t, b, x.device())?.to_dtype(x.dtype())?;
    psi.probs(x, &tt, mask)
}

/// Objective whose input gradient is taken.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    /// Non-negative class weights, renormalised and held constant.
    Weights(Vec<f64>),
}

/// How the negative (non-target mixture) term is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// `sum_j w_j log p_j`.
    #[default]
    WeightedLogProb,
    /// `log sum_j w_j p_j`.
    LogMixtureProb,
}

fn target_weights(target: &Target, n: usize) -> Result<Vec<f64>> {
    match target {
        Target::Class(c) => {
            if *c >= n {
                return Err(Error::Invalid(format!("class {c} is not one of 0..{n}")));
            }
            let mut w = vec![0.0; n];
            w[*c] = 1.0;
            Ok(w)
        }
        Target::Weights(w) => {
            if w.len() != n {
                return Err(Error::Shape(format!("{} weights for {n} classes", w.len())));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Invalid("weights must be finite and non-negative".into()));
            }
            let s: f64 = w.iter().sum();
            if s <= 0.0 {
                return Err(Error::Invalid("all-zero weight vector".into()));
            }
            Ok(w.iter().map(|v| v / s).collect())
        }
    }
}

/// Gradient of the per-example objective with respect to `x`, one target
/// per batch element. `frozen` must come from [`EmotionClassifier::frozen`].
pub fn grad_log_prob(
    frozen: &EmotionClassifier,
    x: &Tensor,
    t: f64,
    mask: &Tensor,
    targets: &[Target],
    mode: NegativeMode,
) -> Result<Tensor> {
    let (b, _, _) = x.dims3()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for batch {b}", targets.len())));
    }
    let n = frozen.n_classes;
    let mut weights = Vec::with_capacity(b * n);
    for target in targets {
        weights.extend(target_weights(target, n)?);
    }
    let w = Tensor::from_vec(weights, (b, n), x.device())?.to_dtype(x.dtype())?;
    let xv = Var::from_tensor(&x.detach())?;
    let tt = Tensor::full(t, b, x.device())?.to_dtype(x.dtype())?;
    let logits = frozen.logits(xv.as_tensor(), &tt, mask, Mode::Eval)?;
    let logp = log_softmax_last(&logits)?;
    let objective = match mode {
        NegativeMode::WeightedLogProb => (logp * w)?.sum_all()?,
        NegativeMode::LogMixtureProb => (logp.exp()? * w)?.sum(D::Minus1)?.log()?.sum_all()?,
    };
    let grads = objective.backward()?;
    match grads.get(xv.as_tensor()) {
        Some(g) => Ok(g.clone()),
        None => Ok(x.zeros_like()?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub gamma: f64,
    pub instruction: EmotionInstruction,
}

impl GuidanceParams {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Invalid(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        self.instruction.validate(n_classes)
    }

    /// Whether guidance leaves the field untouched.
    pub fn is_inert(&self) -> bool {
        self.gamma == 0.0 || (self.instruction.alpha == 0.0 && self.instruction.beta == 0.0)
    }
}

/// Field plus scaled positive and negative classifier gradients.
pub fn pngm_velocity(
    v: &Tensor,
    x: &Tensor,
    t: f64,
    mask: &Tensor,
    frozen: &EmotionClassifier,
    params: &GuidanceParams,
    mode: NegativeMode,
) -> Result<Tensor> {
    params.validate(frozen.n_classes)?;
    if v.dims() != x.dims() {
        return Err(Error::Shape(format!("field {:?} vs state {:?}", v.dims(), x.dims())));
    }
    if params.is_inert() {
        return Ok(v.clone());
    }
    let b = x.dim(0)?;
    let EmotionInstruction { class, alpha, beta } = params.instruction;
    let mut out = v.clone();
    if alpha != 0.0 {
        let pos = grad_log_prob(frozen, x, t, mask, &vec![Target::Class(class); b], mode)?;
        out = (out + (pos * (params.gamma * alpha))?)?;
    }
    if beta != 0.0 {
        let probs = classifier_probs(frozen, x, t, mask)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut targets = Vec::with_capacity(b);
        let mut active = Vec::with_capacity(b);
        for row in probs {
            let mut w = row;
            w[class] = 0.0;
            active.push(w.iter().sum::<f64>() > 0.0);
            if !active.last().unwrap() {
                w = vec![1.0; w.len()];
            }
            targets.push(Target::Weights(w));
        }
        let neg = grad_log_prob(frozen, x, t, mask, &targets, mode)?;
        let keep: Vec<f32> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1), x.device())?.to_dtype(x.dtype())?;
        out = (out - (neg.broadcast_mul(&keep)? * (params.gamma * beta))?)?;
    }
    Ok(out)
}

/// Guidance hook steering every batch element toward the same instruction.
pub struct Pngm {
    pub classifier: EmotionClassifier,
    pub params: GuidanceParams,
    pub mode: NegativeMode,
}

impl Pngm {
    pub fn new(classifier: &EmotionClassifier, params: GuidanceParams, mode: NegativeMode) -> Result<Self> {
        params.validate(classifier.n_classes)?;
        Ok(Self {
            classifier: classifier.frozen()?,
            params,
            mode,
        })
    }
}

impl GuidanceHook for Pngm {
    fn guide(&self, v: &Tensor, x: &Tensor, t: f64, mask: &Tensor) -> Result<Tensor> {
        pngm_velocity(v, x, t, mask, &self.classifier, &self.params, self.mode)
    }
}

/// Mean probability of class `c` at `t = 1` over a set of mels.
pub fn intensity_score(psi: &EmotionClassifier, mels: &[Array2<f32>], c: usize) -> Result<f64> {
    if mels.is_empty() {
        return Err(Error::Invalid("intensity score of an empty set".into()));
    }
    if c >= psi.n_classes {
        return Err(Error::Invalid(format!("class {c} is not one of 0..{}", psi.n_classes)));
    }
    let probs = batched_probs(psi, mels, 1.0, 32)?;
    Ok(probs.iter().map(|p| p[c]).sum::<f64>() / mels.len() as f64)
}

/// Class probabilities for each mel at a fixed `t`.
pub fn batched_probs(psi: &EmotionClassifier, mels: &[Array2<f32>], t: f64, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(mels.len());
    for part in mels.chunks(chunk.max(1)) {
        let refs: Vec<&Array2<f32>> = part.iter().collect();
        let batch = MelBatch::from_mels(&refs, DType::F32)?;
        let p = classifier_probs(psi, &batch.mel, t, &batch.mask)?;
        out.extend(p.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Share of training examples presented as clean mels (`t = 1`).
    pub clean_fraction: f64,
    pub sigma_min: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 50,
            clean_fraction: 0.25,
            sigma_min: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub seed: u64,
    pub train_size: usize,
    pub holdout_size: usize,
    pub final_loss: f64,
    pub holdout_accuracy_clean: f64,
    /// `(t, accuracy)` on noisy interpolants of the held-out split.
    pub holdout_accuracy_by_t: Vec<(f64, f64)>,
}

pub struct TrainedClassifier {
    pub params: ParamStore,
    pub classifier: EmotionClassifier,
    pub report: ClassifierReport,
}

/// Deterministic train/held-out split by position: the last `fraction`
/// of the samples are held out.
pub fn holdout_split(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let holdout = ((n as f64) * fraction).round() as usize;
    let holdout = holdout.min(n.saturating_sub(1));
    let train = (0..n - holdout).collect();
    let held = (n - holdout..n).collect();
    (train, held)
}

/// Accuracy on interpolants at a fixed `t` with seeded noise.
pub fn accuracy_at(
    psi: &EmotionClassifier,
    samples: &[&CorpusSample],
    t: f64,
    sigma_min: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for part in samples.chunks(32) {
        let mels: Vec<&Array2<f32>> = part.iter().map(|s| &s.mel).collect();
        let batch = MelBatch::from_mels(&mels, DType::F32)?;
        let x = noisy_states(&batch, &vec![t; part.len()], sigma_min, &mut rng)?;
        let probs = classifier_probs(psi, &x, t, &batch.mask)?.to_vec2::<f32>()?;
        for (p, s) in probs.iter().zip(part) {
            correct += usize::from(argmax(p) == s.emotion);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn noisy_states(batch: &MelBatch, t: &[f64], sigma_min: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (b, m, d) = batch.mel.dims3()?;
    let noise: Vec<f32> = (0..b * m * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let x0 = apply_mask(&Tensor::from_vec(noise, (b, m, d), batch.mel.device())?, &batch.mask)?;
    let tt = Tensor::new(t, batch.mel.device())?.to_dtype(DType::F32)?;
    Ok(sample_path(&x0, &batch.mel, &tt, sigma_min)?.0)
}

/// Trains a classifier on flow interpolants of the `train` mels and scores
/// it on `held_out`; `observer` receives `(step, loss)` after every update.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    train: &[&CorpusSample],
    held_out: &[&CorpusSample],
    n_mels: usize,
    n_classes: usize,
    config: &ClassifierConfig,
    schedule: &ClassifierTrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<TrainedClassifier> {
    let mut classes: Vec<usize> = train.iter().map(|s| s.emotion).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Invalid(format!(
            "classifier training needs at least 2 emotion classes, corpus has {}",
            classes.len()
        )));
    }
    if held_out.is_empty() {
        return Err(Error::Invalid("classifier training needs a non-empty held-out split".into()));
    }
    if schedule.steps == 0 || schedule.batch_size == 0 {
        return Err(Error::Config("classifier steps and batch_size must be positive".into()));
    }
    let mut params = ParamStore::new(DType::F32, seed);
    let classifier = EmotionClassifier::new(&mut params, n_mels, n_classes, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut opt = Adam::default();
    let mut final_loss = f64::NAN;
    for step in 0..schedule.steps {
        let picks: Vec<&CorpusSample> = (0..schedule.batch_size)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let mels: Vec<&Array2<f32>> = picks.iter().map(|s| &s.mel).collect();
        let batch = MelBatch::from_mels(&mels, DType::F32)?;
        let t: Vec<f64> = picks
            .iter()
            .map(|_| {
                if rng.random::<f64>() < schedule.clean_fraction {
                    1.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let x = noisy_states(&batch, &t, schedule.sigma_min, &mut rng)?;
        let tt = Tensor::new(t.as_slice(), x.device())?.to_dtype(DType::F32)?;
        let logits = classifier.logits(&x, &tt, &batch.mask, Mode::Train(&mut rng))?;
        let labels: Vec<u32> = picks.iter().map(|s| s.emotion as u32).collect();
        let labels = Tensor::new(labels.as_slice(), x.device())?;
        let logp = log_softmax_last(&logits)?;
        let picked = logp.gather(&labels.unsqueeze(1)?, 1)?;
        let loss = (picked.mean_all()? * -1.0)?;
        final_loss = loss.to_scalar::<f32>()? as f64;
        if !final_loss.is_finite() {
            return Err(Error::TrainingDivergence {
                step,
                last_finite: "classifier cross-entropy".into(),
            });
        }
        let grads = loss.backward()?;
        let lr = schedule.learning_rate * ((step + 1) as f64 / schedule.warmup_steps.max(1) as f64).min(1.0);
        opt.step(&params, &grads, lr, Some(1.0))?;
        observer(step, final_loss);
    }
    let mels: Vec<Array2<f32>> = held_out.iter().map(|s| s.mel.clone()).collect();
    let probs = batched_probs(&classifier, &mels, 1.0, 32)?;
    let correct = probs
        .iter()
        .zip(held_out)
        .filter(|(p, s)| argmax(p) == s.emotion)
        .count();
    let mut by_t = Vec::new();
    for t in [0.2, 0.5, 0.9] {
        by_t.push((t, accuracy_at(&classifier, held_out, t, schedule.sigma_min, seed ^ 0x5eed)?));
    }
    Ok(TrainedClassifier {
        params,
        classifier,
        report: ClassifierReport {
            seed,
            train_size: train.len(),
            holdout_size: held_out.len(),
            final_loss,
            holdout_accuracy_clean: correct as f64 / held_out.len() as f64,
            holdout_accuracy_by_t: by_t,
        },
    })
}

fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
