//! Joint training of the acoustic model and flow decoder, checkpoints,
//! synthesis and quantitative evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{alignment_matrices, AcousticConfig, AcousticModel, AcousticOutput, DataDims, DurationSource};
use crate::batch::{unpad, Batch};
use crate::corpus::CorpusConfig;
use crate::ctc::{greedy_decode, phoneme_error_rate};
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, ode_sample, DecoderConfig, FlowConfig, FlowDecoder, GuidanceHook};
use crate::guidance::{
    batched_probs, ClassifierConfig, ClassifierReport, EmotionClassifier, GuidanceParams, NegativeMode, Pngm,
    TrainedClassifier,
};
use crate::nn::{Adam, ParamStore};
use crate::store::{json_hash, sha256_hex, write_atomic, ArrayFile};
use crate::types::{CorpusSample, DurationVector, EmotionInstruction};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "model.safetensors";
const CLASSIFIER_MANIFEST: &str = "classifier.json";
const CLASSIFIER_WEIGHTS: &str = "classifier.safetensors";

/// Conventional mel cepstral distortion constant `10 sqrt(2) / ln 10`.
pub const MCD_CONSTANT: f64 = 10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub acoustic: AcousticConfig,
    pub decoder: DecoderConfig,
    pub flow: FlowConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            acoustic: AcousticConfig::desk(),
            decoder: DecoderConfig::desk(),
            flow: FlowConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.acoustic.validate()?;
        self.flow.validate()?;
        if self.decoder.hidden == 0 || self.decoder.heads == 0 || !self.decoder.hidden.is_multiple_of(self.decoder.heads) {
            return Err(Error::Config(format!(
                "decoder hidden ({}) must be a positive multiple of heads ({})",
                self.decoder.hidden, self.decoder.heads
            )));
        }
        Ok(())
    }
}

pub fn data_dims(corpus: &CorpusConfig) -> Result<DataDims> {
    Ok(DataDims {
        vocab_size: corpus.vocab_size,
        n_speakers: corpus.n_speakers,
        n_emotions: corpus.n_emotions,
        lip_dim: corpus.lip_dim,
        n_mels: corpus.n_mels,
        mel_ratio: corpus.mel_ratio()?,
    })
}

/// Acoustic model and flow decoder sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub params: ParamStore,
    pub acoustic: AcousticModel,
    pub decoder: FlowDecoder,
    pub dims: DataDims,
    pub config: ModelConfig,
}

impl Pipeline {
    pub fn new(dims: DataDims, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(DType::F32, seed);
        let acoustic = AcousticModel::new(&mut params, dims, config.acoustic.clone())?;
        let decoder = FlowDecoder::new(&mut params, "decoder", dims.n_mels, config.acoustic.d_style, &config.decoder)?;
        Ok(Self {
            params,
            acoustic,
            decoder,
            dims,
            config,
        })
    }

    pub fn modules(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .shapes()
            .keys()
            .filter_map(|k| k.split('.').next().map(str::to_string))
            .collect();
        names.dedup();
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub contrastive: f64,
    pub ctc: f64,
    pub pitch: f64,
    pub energy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            ctc: 1.0,
            pitch: 1.0,
            energy: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            contrastive: 0.0,
            ctc: 0.0,
            pitch: 0.0,
            energy: 0.0,
        }
    }
}

/// Which losses a step computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Joint,
    /// Flow matching alone; auxiliary losses are neither computed nor logged.
    FlowOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Metrics are reported every this many steps (and on the last step).
    pub log_every: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 5000,
            learning_rate: 1e-4,
            warmup_steps: 500,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            log_every: 10,
            objective: Objective::Joint,
        }
    }
}

impl TrainConfig {
    /// Short-schedule settings for the desk-scale model.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            warmup_steps: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate ({}) must be positive", self.learning_rate)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm ({}) must be >= 0", self.clip_norm)));
        }
        let w = &self.weights;
        for (name, v) in [
            ("contrastive", w.contrastive),
            ("ctc", w.ctc),
            ("pitch", w.pitch),
            ("energy", w.energy),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} ({v}) must be finite and >= 0")));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warm = ((step + 1) as f64 / self.warmup_steps.max(1) as f64).min(1.0);
        self.learning_rate * warm
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub cfm: f64,
    pub contrastive: Option<f64>,
    pub ctc: Option<f64>,
    pub pitch: Option<f64>,
    pub energy: Option<f64>,
    pub grad_norm: f64,
    pub learning_rate: f64,
    /// Share of batch examples whose alignment durations equal the
    /// ground truth.
    pub mas_exact: f64,
    pub mas_mae: f64,
    pub off_mask_mass: f64,
}

impl StepMetrics {
    fn describe(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        format!(
            "total {:.6}, cfm {:.6}, contrastive {}, ctc {}, pitch {}, energy {}",
            self.total,
            self.cfm,
            opt(self.contrastive),
            opt(self.ctc),
            opt(self.pitch),
            opt(self.energy)
        )
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-example exact-match indicator and absolute errors of predicted
/// against reference durations.
pub fn duration_agreement(predicted: &[DurationVector], reference: &[DurationVector]) -> (usize, f64, usize) {
    let mut exact = 0;
    let mut abs_err = 0.0;
    let mut count = 0;
    for (p, r) in predicted.iter().zip(reference) {
        exact += usize::from(p == r);
        for (a, b) in p.as_slice().iter().zip(r.as_slice()) {
            abs_err += (*a as f64 - *b as f64).abs();
            count += 1;
        }
    }
    (exact, abs_err, count)
}

/// Mean attention mass per valid frame that falls outside the
/// ground-truth alignment.
pub fn off_mask_mass(out: &AcousticOutput, batch: &Batch) -> Result<f64> {
    let off = (&batch.pair_mask - &batch.gt_alignment)?;
    let mass = scalar(&(&out.attended.weights * off)?.sum_all()?)?;
    Ok(mass / batch.frame_lengths.iter().sum::<usize>() as f64)
}

/// Seeded batch sampler: batch `step` depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step as u64 + 1);
    sample_indices(&mut rng, n, batch_size.min(n)).into_vec()
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step as u64 + 2);
    rng
}

pub struct Trainer {
    pub pipeline: Pipeline,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Number of completed steps.
    pub step: usize,
    last_finite: Option<StepMetrics>,
}

impl Trainer {
    pub fn new(pipeline: Pipeline, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            pipeline,
            optimizer: Adam::default(),
            config,
            step: 0,
            last_finite: None,
        })
    }

    fn divergence(&self, step: usize) -> Error {
        Error::TrainingDivergence {
            step,
            last_finite: self
                .last_finite
                .as_ref()
                .map_or_else(|| "none".to_string(), |m| format!("step {}: {}", m.step, m.describe())),
        }
    }

    /// Losses for one batch without updating parameters.
    pub fn losses(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(Tensor, StepMetrics)> {
        let p = &self.pipeline;
        let w = &self.config.weights;
        let out = p.acoustic.forward(batch, DurationSource::GroundTruth, true)?;
        let cfm = cfm_loss(
            &p.decoder,
            &out.mu,
            &batch.mel,
            &out.style,
            &out.mel_mask,
            p.config.flow.sigma_min,
            rng,
        )?
        .loss;
        let (exact, abs_err, count) = duration_agreement(&out.mas_durations, &batch.durations);
        let mut metrics = StepMetrics {
            step: self.step,
            total: 0.0,
            cfm: scalar(&cfm)?,
            contrastive: None,
            ctc: None,
            pitch: None,
            energy: None,
            grad_norm: 0.0,
            learning_rate: self.config.learning_rate_at(self.step),
            mas_exact: exact as f64 / batch.size() as f64,
            mas_mae: abs_err / count.max(1) as f64,
            off_mask_mass: off_mask_mass(&out, batch)?,
        };
        let total = match self.config.objective {
            Objective::FlowOnly => cfm,
            Objective::Joint => {
                let cl = p.acoustic.contrastive_loss(&out, batch)?;
                let ctc = p.acoustic.ctc_loss(&out, batch)?;
                let missing = || Error::Invalid("prosody losses need teacher forcing".into());
                let pitch = out.prosody.pitch_loss.clone().ok_or_else(missing)?;
                let energy = out.prosody.energy_loss.clone().ok_or_else(missing)?;
                metrics.contrastive = Some(scalar(&cl)?);
                metrics.ctc = Some(scalar(&ctc)?);
                metrics.pitch = Some(scalar(&pitch)?);
                metrics.energy = Some(scalar(&energy)?);
                let total = (cfm + (cl * w.contrastive)?)?;
                let total = (total + (ctc * w.ctc)?)?;
                let total = (total + (pitch * w.pitch)?)?;
                (total + (energy * w.energy)?)?
            }
        };
        metrics.total = scalar(&total)?;
        Ok((total, metrics))
    }

    /// One optimisation step on the batch the sampler assigns to the
    /// current step.
    pub fn train_step(&mut self, samples: &[CorpusSample]) -> Result<StepMetrics> {
        let step = self.step;
        let picks: Vec<&CorpusSample> = batch_indices(self.config.seed, step, samples.len(), self.config.batch_size)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let batch = Batch::from_samples(&picks, DType::F32)?;
        let mut rng = step_rng(self.config.seed, step);
        let (total, mut metrics) = match self.losses(&batch, &mut rng) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(self.divergence(step)),
            Err(e) => return Err(e),
        };
        if !metrics.total.is_finite() {
            return Err(self.divergence(step));
        }
        let grads = total.backward()?;
        let clip = (self.config.clip_norm > 0.0).then_some(self.config.clip_norm);
        metrics.grad_norm = match self.optimizer.step(&self.pipeline.params, &grads, metrics.learning_rate, clip) {
            Ok(n) => n,
            Err(Error::NonFinite(_)) => return Err(self.divergence(step)),
            Err(e) => return Err(e),
        };
        self.step += 1;
        self.last_finite = Some(metrics.clone());
        Ok(metrics)
    }

    /// Trains until `config.steps` or `stop_at` completed steps, whichever
    /// comes first, passing logged metrics to `observer`.
    pub fn run(
        &mut self,
        samples: &[CorpusSample],
        stop_at: Option<usize>,
        observer: &mut dyn FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        let end = stop_at.map_or(self.config.steps, |s| s.min(self.config.steps));
        while self.step < end {
            let metrics = self.train_step(samples)?;
            if metrics.step % self.config.log_every == 0 || self.step == self.config.steps {
                observer(&metrics)?;
            }
        }
        Ok(())
    }
}

/// Trains a fresh pipeline to completion and returns it with every logged
/// metrics record.
pub fn train(
    samples: &[CorpusSample],
    dims: DataDims,
    model: ModelConfig,
    config: TrainConfig,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let pipeline = Pipeline::new(dims, model, config.seed)?;
    let mut trainer = Trainer::new(pipeline, config)?;
    let mut log = Vec::new();
    trainer.run(samples, None, &mut |m| {
        log.push(m.clone());
        Ok(())
    })?;
    Ok((trainer, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub dims: DataDims,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    pub modules: Vec<String>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub weights_sha256: String,
    /// Hash of the training corpus manifest, when known.
    pub corpus_hash: Option<String>,
}

fn check_version(path: &Path, value: &serde_json::Value) -> Result<()> {
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            reason: "missing format_version".into(),
        })? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found,
        });
    }
    Ok(())
}

fn read_verified(dir: &Path, file: &str, sha256: &str) -> Result<ArrayFile> {
    let path = dir.join(file);
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != sha256 {
        return Err(Error::Checksum(path));
    }
    ArrayFile::from_bytes(&bytes)
}

/// Writes parameters, optimizer state and the manifest under `dir`.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer, corpus_hash: Option<&str>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let p = &trainer.pipeline;
    let mut file = ArrayFile::default();
    p.params.export("param.", &mut file)?;
    trainer.optimizer.export("adam.", &mut file)?;
    file.metadata.insert("step".into(), trainer.step.to_string());
    let bytes = file.to_bytes()?;
    write_atomic(&dir.join(WEIGHTS), &bytes)?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        step: trainer.step,
        dims: p.dims,
        model: p.config.clone(),
        train: trainer.config.clone(),
        config_hash: json_hash(&(&p.dims, &p.config))?,
        modules: p.modules(),
        shapes: p.params.shapes(),
        weights_sha256: sha256_hex(&bytes),
        corpus_hash: corpus_hash.map(str::to_string),
    };
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let value: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
    check_version(&path, &value)?;
    Ok(serde_json::from_value(value)?)
}

/// Restores a trainer exactly as saved, ready to resume.
pub fn load_checkpoint(dir: &Path) -> Result<(Trainer, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let file = read_verified(dir, WEIGHTS, &manifest.weights_sha256)?;
    let pipeline = Pipeline::new(manifest.dims, manifest.model.clone(), manifest.train.seed)?;
    if pipeline.params.shapes() != manifest.shapes {
        return Err(Error::Corrupt {
            path: dir.join(MANIFEST),
            reason: "parameter shapes do not match the configured model".into(),
        });
    }
    pipeline.params.import("param.", &file)?;
    let mut optimizer = Adam::default();
    optimizer.import("adam.", &file, DType::F32)?;
    let mut trainer = Trainer::new(pipeline, manifest.train.clone())?;
    trainer.optimizer = optimizer;
    trainer.step = manifest.step;
    Ok((trainer, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub format_version: u32,
    pub n_classes: usize,
    pub n_mels: usize,
    pub config: ClassifierConfig,
    pub architecture_hash: String,
    pub seed: u64,
    pub weights_sha256: String,
    pub report: Option<ClassifierReport>,
}

fn architecture_hash(n_mels: usize, n_classes: usize, config: &ClassifierConfig) -> Result<String> {
    json_hash(&(n_mels, n_classes, config))
}

pub fn save_classifier(dir: &Path, trained: &TrainedClassifier, n_mels: usize) -> Result<ClassifierManifest> {
    fs::create_dir_all(dir)?;
    let mut file = ArrayFile::default();
    trained.params.export("", &mut file)?;
    let bytes = file.to_bytes()?;
    write_atomic(&dir.join(CLASSIFIER_WEIGHTS), &bytes)?;
    let n = trained.classifier.n_classes();
    let config = trained.classifier.config().clone();
    let manifest = ClassifierManifest {
        format_version: CHECKPOINT_VERSION,
        n_classes: n,
        n_mels,
        architecture_hash: architecture_hash(n_mels, n, &config)?,
        config,
        seed: trained.report.seed,
        weights_sha256: sha256_hex(&bytes),
        report: Some(trained.report.clone()),
    };
    write_atomic(
        &dir.join(CLASSIFIER_MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn has_classifier(dir: &Path) -> bool {
    dir.join(CLASSIFIER_MANIFEST).is_file()
}

pub fn load_classifier(dir: &Path) -> Result<(EmotionClassifier, ClassifierManifest)> {
    let path = dir.join(CLASSIFIER_MANIFEST);
    let value: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
    check_version(&path, &value)?;
    let manifest: ClassifierManifest = serde_json::from_value(value)?;
    if architecture_hash(manifest.n_mels, manifest.n_classes, &manifest.config)? != manifest.architecture_hash {
        return Err(Error::Corrupt {
            path,
            reason: "architecture hash does not match the stored configuration".into(),
        });
    }
    let file = read_verified(dir, CLASSIFIER_WEIGHTS, &manifest.weights_sha256)?;
    let mut params = ParamStore::new(DType::F32, manifest.seed);
    let classifier = EmotionClassifier::new(&mut params, manifest.n_mels, manifest.n_classes, manifest.config.clone())?;
    params.import("", &file)?;
    Ok((classifier, manifest))
}

/// Guidance applied during sampling.
pub struct GuidanceSpec<'a> {
    pub classifier: &'a EmotionClassifier,
    pub params: GuidanceParams,
    pub mode: NegativeMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub mel: Array2<f32>,
    /// Alignment durations used to expand the phonemes.
    pub durations: DurationVector,
    /// Greedy CTC decode of the fused frame sequence.
    pub decoded: Vec<u32>,
}

/// Noise seed for the `index`-th sample of a request.
pub fn render_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

const RENDER_CHUNK: usize = 16;

/// Full inference: alignment durations from the attention, then the ODE
/// sampler, optionally guided. Only the phonemes, lip features and speaker
/// of each sample are read.
pub fn synthesize(
    pipeline: &Pipeline,
    samples: &[&CorpusSample],
    guidance: Option<&GuidanceSpec<'_>>,
    flow: &FlowConfig,
    seed: u64,
) -> Result<Vec<Render>> {
    flow.validate()?;
    let hook = match guidance {
        Some(g) => {
            if g.classifier.n_classes() != pipeline.dims.n_emotions {
                return Err(Error::Config(format!(
                    "classifier has {} classes, pipeline {} emotions",
                    g.classifier.n_classes(),
                    pipeline.dims.n_emotions
                )));
            }
            Some(Pngm::new(g.classifier, g.params, g.mode)?)
        }
        None => None,
    };
    let mut renders = Vec::with_capacity(samples.len());
    for (chunk_index, chunk) in samples.chunks(RENDER_CHUNK).enumerate() {
        let batch = Batch::from_samples(chunk, DType::F32)?;
        let out = pipeline.acoustic.forward(&batch, DurationSource::Alignment, false)?;
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| render_seed(seed, chunk_index * RENDER_CHUNK + i))
            .collect();
        let mel = ode_sample(
            &pipeline.decoder,
            &out.mu,
            &out.style,
            &out.mel_mask,
            flow,
            hook.as_ref().map(|h| h as &dyn GuidanceHook),
            &seeds,
            &out.mel_lengths,
        )?;
        let mels = unpad(&mel, &out.mel_lengths)?;
        let log_probs = out.fused.log_probs.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        for (i, mel) in mels.into_iter().enumerate() {
            let frames = batch.frame_lengths[i];
            renders.push(Render {
                mel,
                durations: out.durations[i].clone(),
                decoded: greedy_decode(&log_probs[i][..frames], pipeline.acoustic.fusion.blank()),
            });
        }
    }
    Ok(renders)
}

fn one_sided_warp(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let (n, m) = (a.nrows(), b.nrows());
    let dist = |i: usize, j: usize| -> f64 {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut prev: Vec<f64> = (0..m).map(|j| dist(0, j)).collect();
    for i in 1..n {
        let mut best = f64::INFINITY;
        let mut row = Vec::with_capacity(m);
        for (j, p) in prev.iter().enumerate() {
            best = best.min(*p);
            row.push(best + dist(i, j));
        }
        prev = row;
    }
    prev.into_iter().fold(f64::INFINITY, f64::min) / n as f64
}

/// Mel cepstral distortion after time warping: each frame of one input is
/// matched monotonically to a frame of the other under Euclidean distance,
/// the mean matched distance is taken in both directions and averaged, and
/// the result is scaled by [`MCD_CONSTANT`].
pub fn mcd_dtw(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Invalid("MCD-DTW of an empty mel".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("{} vs {} mel bins", a.ncols(), b.ncols())));
    }
    Ok(MCD_CONSTANT * 0.5 * (one_sided_warp(a, b) + one_sided_warp(b, a)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub flow: FlowConfig,
    pub seed: u64,
    pub gamma: f64,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Samples rendered per intensity cell; 0 uses the whole split.
    pub intensity_samples: usize,
    pub negative_mode: NegativeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig {
                temperature: 0.667,
                ..FlowConfig::default()
            },
            seed: 0,
            gamma: 15.0,
            alpha_grid: vec![0.0, 1.0, 2.5, 5.0],
            beta_grid: vec![0.0, 1.0, 2.0],
            intensity_samples: 0,
            negative_mode: NegativeMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityCell {
    pub emotion: usize,
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityShape {
    /// Adjacent α pairs (per emotion and β) where the score drops.
    pub alpha_violations: usize,
    pub alpha_pairs: usize,
    /// `IS(α_max, β=0) - IS(α=0, β=0)` per emotion.
    pub gain_at_max_alpha: Vec<f64>,
    /// Per emotion and β > 0: whether IS at the largest α is at least the
    /// β = 0 value.
    pub beta_dominates: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub checkpoint_step: usize,
    pub samples: usize,
    pub config: EvalConfig,
    pub model: ModelConfig,
    pub mcd_dtw: f64,
    /// MCD-DTW when each render is scored against a cyclically shifted
    /// sample's ground truth.
    pub baseline_mcd_dtw: f64,
    pub mcd_relative_improvement: f64,
    pub mas_exact_match: f64,
    pub mas_mae: f64,
    pub phoneme_error_rate: f64,
    pub off_mask_mass: f64,
    pub intensity: Vec<IntensityCell>,
    pub intensity_shape: Option<IntensityShape>,
}

/// Intensity score of every `(emotion, α, β)` cell over `samples`.
pub fn intensity_grid(
    pipeline: &Pipeline,
    classifier: &EmotionClassifier,
    samples: &[&CorpusSample],
    config: &EvalConfig,
    observer: &mut dyn FnMut(&IntensityCell),
) -> Result<Vec<IntensityCell>> {
    if config.alpha_grid.is_empty() || config.beta_grid.is_empty() {
        return Err(Error::Invalid("guidance grids must be non-empty".into()));
    }
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to render".into()));
    }
    let n = pipeline.dims.n_emotions;
    let probs_of = |renders: Vec<Render>| -> Result<Vec<Vec<f64>>> {
        let mels: Vec<Array2<f32>> = renders.into_iter().map(|r| r.mel).collect();
        batched_probs(classifier, &mels, 1.0, 32)
    };
    let mut unguided: Option<Vec<Vec<f64>>> = None;
    let mut cells = Vec::new();
    for emotion in 0..n {
        for &beta in &config.beta_grid {
            for &alpha in &config.alpha_grid {
                let params = GuidanceParams {
                    gamma: config.gamma,
                    instruction: EmotionInstruction::new(emotion, alpha, beta, n)?,
                };
                let probs = if params.is_inert() {
                    if unguided.is_none() {
                        unguided = Some(probs_of(synthesize(pipeline, samples, None, &config.flow, config.seed)?)?);
                    }
                    unguided.clone().unwrap()
                } else {
                    let spec = GuidanceSpec {
                        classifier,
                        params,
                        mode: config.negative_mode,
                    };
                    probs_of(synthesize(pipeline, samples, Some(&spec), &config.flow, config.seed)?)?
                };
                let cell = IntensityCell {
                    emotion,
                    alpha,
                    beta,
                    score: probs.iter().map(|p| p[emotion]).sum::<f64>() / probs.len() as f64,
                };
                observer(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// Monotonicity, gain and β-dominance summary of an intensity grid.
pub fn intensity_shape(cells: &[IntensityCell], n_emotions: usize) -> IntensityShape {
    let mut alphas: Vec<f64> = cells.iter().map(|c| c.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut betas: Vec<f64> = cells.iter().map(|c| c.beta).collect();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let score = |e: usize, a: f64, b: f64| {
        cells
            .iter()
            .find(|c| c.emotion == e && c.alpha == a && c.beta == b)
            .map(|c| c.score)
    };
    let mut violations = 0;
    let mut pairs = 0;
    let mut gains = Vec::new();
    let mut dominates = Vec::new();
    let a_max = alphas.last().copied().unwrap_or(0.0);
    for e in 0..n_emotions {
        for &b in &betas {
            for w in alphas.windows(2) {
                if let (Some(lo), Some(hi)) = (score(e, w[0], b), score(e, w[1], b)) {
                    pairs += 1;
                    violations += usize::from(hi < lo);
                }
            }
        }
        if let (Some(lo), Some(hi)) = (score(e, 0.0, 0.0), score(e, a_max, 0.0)) {
            gains.push(hi - lo);
        }
        if let Some(base) = score(e, a_max, 0.0) {
            for &b in betas.iter().filter(|&&b| b > 0.0) {
                if let Some(s) = score(e, a_max, b) {
                    dominates.push(s >= base);
                }
            }
        }
    }
    IntensityShape {
        alpha_violations: violations,
        alpha_pairs: pairs,
        gain_at_max_alpha: gains,
        beta_dominates: dominates,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostics {
    pub mas_exact_match: f64,
    pub mas_mae: f64,
    /// Share of samples whose greedy CTC decode equals the phonemes.
    pub ctc_exact_match: f64,
    pub phoneme_error_rate: f64,
    pub off_mask_mass: f64,
}

/// Inference-mode alignment and CTC quality, without running the sampler.
pub fn alignment_diagnostics(pipeline: &Pipeline, samples: &[&CorpusSample]) -> Result<AlignmentDiagnostics> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to diagnose".into()));
    }
    let (mut exact, mut abs_err, mut count) = (0, 0.0, 0);
    let (mut ctc_exact, mut per, mut off, mut frames) = (0, 0.0, 0.0, 0);
    let blank = pipeline.acoustic.fusion.blank();
    for chunk in samples.chunks(RENDER_CHUNK) {
        let batch = Batch::from_samples(chunk, DType::F32)?;
        let out = pipeline.acoustic.forward(&batch, DurationSource::Alignment, false)?;
        let (e, a, c) = duration_agreement(&out.mas_durations, &batch.durations);
        exact += e;
        abs_err += a;
        count += c;
        let log_probs = out.fused.log_probs.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        for (i, s) in chunk.iter().enumerate() {
            let decoded = greedy_decode(&log_probs[i][..batch.frame_lengths[i]], blank);
            ctc_exact += usize::from(decoded == s.phonemes.ids());
            per += phoneme_error_rate(&decoded, s.phonemes.ids());
        }
        let f: usize = batch.frame_lengths.iter().sum();
        off += off_mask_mass(&out, &batch)? * f as f64;
        frames += f;
    }
    let n = samples.len() as f64;
    Ok(AlignmentDiagnostics {
        mas_exact_match: exact as f64 / n,
        mas_mae: abs_err / count.max(1) as f64,
        ctc_exact_match: ctc_exact as f64 / n,
        phoneme_error_rate: per / n,
        off_mask_mass: off / frames as f64,
    })
}

/// Inference-mode lip-to-phoneme attention of each sample, `(F, P)`.
pub fn attention_maps(pipeline: &Pipeline, samples: &[&CorpusSample]) -> Result<Vec<Array2<f64>>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(RENDER_CHUNK) {
        let batch = Batch::from_samples(chunk, DType::F32)?;
        let out = pipeline.acoustic.forward(&batch, DurationSource::Alignment, false)?;
        maps.extend(alignment_matrices(&out.attended.weights, &batch.frame_lengths, &batch.phoneme_lengths)?);
    }
    Ok(maps)
}

/// Scores renders of `samples` against their ground truth and, with a
/// classifier, sweeps the guidance grid.
pub fn evaluate(
    pipeline: &Pipeline,
    checkpoint_step: usize,
    classifier: Option<&EmotionClassifier>,
    samples: &[&CorpusSample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if samples.len() < 2 {
        return Err(Error::Invalid("evaluation needs at least 2 samples".into()));
    }
    let renders = synthesize(pipeline, samples, None, &config.flow, config.seed)?;
    let n = samples.len();
    let mut mcd = 0.0;
    let mut baseline = 0.0;
    let mut per = 0.0;
    for (i, (r, s)) in renders.iter().zip(samples).enumerate() {
        mcd += mcd_dtw(&r.mel, &s.mel)?;
        baseline += mcd_dtw(&renders[(i + 1) % n].mel, &s.mel)?;
        per += phoneme_error_rate(&r.decoded, s.phonemes.ids());
    }
    let predicted: Vec<DurationVector> = renders.iter().map(|r| r.durations.clone()).collect();
    let reference: Vec<DurationVector> = samples.iter().map(|s| s.gt_durations.clone()).collect();
    let (exact, abs_err, count) = duration_agreement(&predicted, &reference);
    let mut off_mass = 0.0;
    let mut frames = 0;
    for chunk in samples.chunks(RENDER_CHUNK) {
        let batch = Batch::from_samples(chunk, DType::F32)?;
        let out = pipeline.acoustic.forward(&batch, DurationSource::Alignment, false)?;
        let f: usize = batch.frame_lengths.iter().sum();
        off_mass += off_mask_mass(&out, &batch)? * f as f64;
        frames += f;
    }
    let (mcd, baseline) = (mcd / n as f64, baseline / n as f64);
    let intensity = match classifier {
        Some(c) if !config.alpha_grid.is_empty() && !config.beta_grid.is_empty() => {
            let subset: Vec<&CorpusSample> = match config.intensity_samples {
                0 => samples.to_vec(),
                k => samples.iter().take(k).copied().collect(),
            };
            intensity_grid(pipeline, c, &subset, config, &mut |_| {})?
        }
        _ => Vec::new(),
    };
    let intensity_shape = (!intensity.is_empty()).then(|| intensity_shape(&intensity, pipeline.dims.n_emotions));
    Ok(EvalReport {
        format_version: CHECKPOINT_VERSION,
        checkpoint_step,
        samples: n,
        config: config.clone(),
        model: pipeline.config.clone(),
        mcd_dtw: mcd,
        baseline_mcd_dtw: baseline,
        mcd_relative_improvement: 1.0 - mcd / baseline,
        mas_exact_match: exact as f64 / n as f64,
        mas_mae: abs_err / count.max(1) as f64,
        phoneme_error_rate: per / n as f64,
        off_mask_mass: off_mass / frames as f64,
        intensity,
        intensity_shape,
    })
}
