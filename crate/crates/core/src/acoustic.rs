//! Phoneme and lip encoders, prosody adaptor, lip-prosody aligner,
//! conformer fusion with CTC, and the speaker adapter that produces the
//! acoustic prior `mu`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::align::{contrastive_loss_tensor, length_regulate_tensor, mas, TemperatureMode};
use crate::batch::Batch;
use crate::ctc::ctc_loss;
use crate::error::{Error, Result};
use crate::nn::{
    apply_mask, length_mask, log_softmax_last, sinusoidal_positions, Attended, Conv2d3x3, DepthwiseConv1d,
    FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore, sigmoid, StyleLayerNorm, StyleModulation,
    TransformerLayer,
};
use crate::types::DurationVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticConfig {
    pub d_model: usize,
    pub d_style: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub ff_hidden: usize,
    pub lpa_heads: usize,
    pub conformer_blocks: usize,
    pub conformer_heads: usize,
    pub conv_kernel: usize,
    pub adapter_channels: usize,
    /// Adds relative-progress encodings to both sides of the lip-prosody
    /// attention.
    pub position_hint: bool,
    pub tau: f64,
    pub temperature_mode: TemperatureMode,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_style: 256,
            encoder_blocks: 4,
            encoder_heads: 2,
            ff_hidden: 1024,
            lpa_heads: 8,
            conformer_blocks: 5,
            conformer_heads: 4,
            conv_kernel: 7,
            adapter_channels: 8,
            position_hint: true,
            tau: 0.1,
            temperature_mode: TemperatureMode::Symmetric,
        }
    }
}

impl AcousticConfig {
    /// Narrow variant that trains in minutes on a single CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            d_style: 64,
            encoder_blocks: 2,
            ff_hidden: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, heads) in [
            ("encoder_heads", self.encoder_heads),
            ("lpa_heads", self.lpa_heads),
            ("conformer_heads", self.conformer_heads),
        ] {
            if heads == 0 || !self.d_model.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "d_model ({}) must be divisible by {name} ({heads})",
                    self.d_model
                )));
            }
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_kernel ({}) must be odd", self.conv_kernel)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau ({}) must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Corpus-derived sizes the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub lip_dim: usize,
    pub n_mels: usize,
    pub mel_ratio: usize,
}

/// Learned per-speaker style vectors.
#[derive(Debug, Clone)]
pub struct SpeakerTable {
    table: Tensor,
    n_speakers: usize,
}

impl SpeakerTable {
    pub fn new(ps: &mut ParamStore, name: &str, n_speakers: usize, d_style: usize) -> Result<Self> {
        Ok(Self {
            table: ps.param(&format!("{name}.table"), &[n_speakers, d_style], Init::Normal(1.0))?,
            n_speakers,
        })
    }

    /// `(B,)` u32 ids to `(B, d_s)` vectors.
    pub fn lookup(&self, ids: &Tensor) -> Result<Tensor> {
        for id in ids.to_vec1::<u32>()? {
            if id as usize >= self.n_speakers {
                return Err(Error::Invalid(format!(
                    "unknown speaker {id}; known speakers are 0..{}",
                    self.n_speakers
                )));
            }
        }
        Ok(self.table.index_select(ids, 0)?)
    }
}

/// Phoneme embedding followed by style-conditioned transformer blocks.
#[derive(Debug, Clone)]
pub struct PhonemeEncoder {
    embedding: Tensor,
    layers: Vec<TransformerLayer>,
    out_norm: StyleLayerNorm,
    d_model: usize,
}

impl PhonemeEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, vocab: usize, c: &AcousticConfig) -> Result<Self> {
        let layers = (0..c.encoder_blocks)
            .map(|i| {
                TransformerLayer::new(
                    ps,
                    &format!("{name}.block{i}"),
                    c.d_model,
                    c.encoder_heads,
                    c.ff_hidden,
                    Some(c.d_style),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding: ps.param(&format!("{name}.embedding"), &[vocab, c.d_model], Init::Normal(1.0))?,
            layers,
            out_norm: StyleLayerNorm::new(ps, &format!("{name}.out_norm"), c.d_style, c.d_model)?,
            d_model: c.d_model,
        })
    }

    /// `phonemes: (B, P)` u32, `style: (B, d_s)`, `mask: (B, P)`; returns
    /// `(B, P, d_m)`.
    pub fn forward(&self, phonemes: &Tensor, style: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, p) = phonemes.dims2()?;
        let x = self
            .embedding
            .index_select(&phonemes.flatten_all()?, 0)?
            .reshape((b, p, self.d_model))?;
        let pos = sinusoidal_positions(p, self.d_model, x.dtype(), x.device())?;
        let mut x = apply_mask(&x.broadcast_add(&pos)?, mask)?;
        for layer in &self.layers {
            x = layer.forward(&x, mask, Some(style))?;
        }
        apply_mask(&self.out_norm.forward(&x, style)?, mask)
    }
}

#[derive(Debug, Clone)]
struct ScalarHead {
    hidden: Linear,
    out: Linear,
}

impl ScalarHead {
    fn new(ps: &mut ParamStore, name: &str, d_model: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(ps, &format!("{name}.hidden"), d_model, d_model)?,
            out: Linear::new(ps, &format!("{name}.out"), d_model, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.out.forward(&self.hidden.forward(x)?.silu()?)?.squeeze(D::Minus1)?)
    }
}

#[derive(Debug, Clone)]
pub struct ProsodyOutput {
    /// `O_s` plus pitch and energy embeddings, `(B, P, d_m)`.
    pub o_p: Tensor,
    pub pitch_pred: Tensor,
    pub energy_pred: Tensor,
    pub pitch_embedding: Tensor,
    pub energy_embedding: Tensor,
    pub pitch_loss: Option<Tensor>,
    pub energy_loss: Option<Tensor>,
}

/// Per-phoneme pitch and energy predictors whose scalars are embedded back
/// into the phoneme sequence.
#[derive(Debug, Clone)]
pub struct ProsodyAdaptor {
    pitch: ScalarHead,
    energy: ScalarHead,
    pitch_embed: Linear,
    energy_embed: Linear,
}

fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let se = ((pred - target)?.sqr()? * mask)?.sum_all()?;
    Ok((se / mask.sum_all()?)?)
}

impl ProsodyAdaptor {
    pub fn new(ps: &mut ParamStore, name: &str, d_model: usize) -> Result<Self> {
        Ok(Self {
            pitch: ScalarHead::new(ps, &format!("{name}.pitch"), d_model)?,
            energy: ScalarHead::new(ps, &format!("{name}.energy"), d_model)?,
            pitch_embed: Linear::new(ps, &format!("{name}.pitch_embed"), 1, d_model)?,
            energy_embed: Linear::new(ps, &format!("{name}.energy_embed"), 1, d_model)?,
        })
    }

    /// With `targets`, the embeddings use the ground-truth scalars and the
    /// losses are filled in; otherwise predictions are embedded.
    pub fn forward(&self, o_s: &Tensor, mask: &Tensor, targets: Option<(&Tensor, &Tensor)>) -> Result<ProsodyOutput> {
        let pitch_pred = (self.pitch.forward(o_s)? * mask)?;
        let energy_pred = (self.energy.forward(o_s)? * mask)?;
        let (pitch_in, energy_in, pitch_loss, energy_loss) = match targets {
            Some((pitch, energy)) => {
                if pitch.dims() != mask.dims() || energy.dims() != mask.dims() {
                    return Err(Error::Shape(format!(
                        "prosody targets {:?}/{:?} for phonemes {:?}",
                        pitch.dims(),
                        energy.dims(),
                        mask.dims()
                    )));
                }
                (
                    pitch.clone(),
                    energy.clone(),
                    Some(masked_mse(&pitch_pred, pitch, mask)?),
                    Some(masked_mse(&energy_pred, energy, mask)?),
                )
            }
            None => (pitch_pred.clone(), energy_pred.clone(), None, None),
        };
        let pitch_embedding = apply_mask(&self.pitch_embed.forward(&pitch_in.unsqueeze(D::Minus1)?)?, mask)?;
        let energy_embedding = apply_mask(&self.energy_embed.forward(&energy_in.unsqueeze(D::Minus1)?)?, mask)?;
        let o_p = ((o_s + &pitch_embedding)? + &energy_embedding)?;
        Ok(ProsodyOutput {
            o_p,
            pitch_pred,
            energy_pred,
            pitch_embedding,
            energy_embedding,
            pitch_loss,
            energy_loss,
        })
    }
}

/// Linear projection of per-frame lip features and one transformer layer.
#[derive(Debug, Clone)]
pub struct LipEncoder {
    proj: Linear,
    layer: TransformerLayer,
}

impl LipEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, lip_dim: usize, c: &AcousticConfig) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.proj"), lip_dim, c.d_model)?,
            layer: TransformerLayer::new(ps, &format!("{name}.layer"), c.d_model, c.encoder_heads, c.ff_hidden, None)?,
        })
    }

    pub fn forward(&self, lips: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = apply_mask(&self.proj.forward(lips)?, mask)?;
        self.layer.forward(&x, mask, None)
    }

    /// Diagnostic pass with self-attention replaced by the identity.
    pub fn forward_local(&self, lips: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = apply_mask(&self.proj.forward(lips)?, mask)?;
        self.layer.forward_local(&x, mask, None)
    }
}

/// Sinusoidal encoding of each position's fraction of its sequence length,
/// `(B, T, dim)`.
pub fn progress_encoding(lengths: &[usize], t_max: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f64; lengths.len() * t_max * dim];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(t_max) {
            let u = (t as f64 + 0.5) / len as f64;
            for i in 0..half {
                let freq = std::f64::consts::PI * (i + 1) as f64;
                let base = (b * t_max + t) * dim;
                data[base + i] = (freq * u).sin();
                data[base + half + i] = (freq * u).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (lengths.len(), t_max, dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Lip frames attending over prosody-aware phoneme encodings.
#[derive(Debug, Clone)]
pub struct LipProsodyAligner {
    attn: MultiHeadAttention,
    position_hint: bool,
    d_model: usize,
}

impl LipProsodyAligner {
    pub fn new(ps: &mut ParamStore, name: &str, c: &AcousticConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(ps, name, c.d_model, c.lpa_heads)?,
            position_hint: c.position_hint,
            d_model: c.d_model,
        })
    }

    pub fn forward(
        &self,
        lip: &Tensor,
        frame_lengths: &[usize],
        o_p: &Tensor,
        phoneme_lengths: &[usize],
        phoneme_mask: &Tensor,
    ) -> Result<Attended> {
        if !self.position_hint {
            return crate::align::cross_attention(&self.attn, lip, o_p, Some(phoneme_mask));
        }
        let (_, f, _) = lip.dims3()?;
        let (_, p, _) = o_p.dims3()?;
        let qf = progress_encoding(frame_lengths, f, self.d_model, lip.dtype())?;
        let kp = progress_encoding(phoneme_lengths, p, self.d_model, o_p.dtype())?;
        crate::align::cross_attention(&self.attn, &(lip + qf)?, &(o_p + kp)?, Some(phoneme_mask))
    }
}

#[derive(Debug, Clone)]
struct ConformerBlock {
    ff1_norm: LayerNorm,
    ff1: FeedForward,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    conv_norm: LayerNorm,
    conv_in: Linear,
    depthwise: DepthwiseConv1d,
    conv_mid_norm: LayerNorm,
    conv_out: Linear,
    ff2_norm: LayerNorm,
    ff2: FeedForward,
    out_norm: LayerNorm,
}

impl ConformerBlock {
    fn new(ps: &mut ParamStore, name: &str, c: &AcousticConfig) -> Result<Self> {
        let d = c.d_model;
        Ok(Self {
            ff1_norm: LayerNorm::new(ps, &format!("{name}.ff1_norm"), d)?,
            ff1: FeedForward::new(ps, &format!("{name}.ff1"), d, c.ff_hidden)?,
            attn_norm: LayerNorm::new(ps, &format!("{name}.attn_norm"), d)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, c.conformer_heads)?,
            conv_norm: LayerNorm::new(ps, &format!("{name}.conv_norm"), d)?,
            conv_in: Linear::new(ps, &format!("{name}.conv_in"), d, 2 * d)?,
            depthwise: DepthwiseConv1d::new(ps, &format!("{name}.depthwise"), d, c.conv_kernel)?,
            conv_mid_norm: LayerNorm::new(ps, &format!("{name}.conv_mid_norm"), d)?,
            conv_out: Linear::new(ps, &format!("{name}.conv_out"), d, d)?,
            ff2_norm: LayerNorm::new(ps, &format!("{name}.ff2_norm"), d)?,
            ff2: FeedForward::new(ps, &format!("{name}.ff2"), d, c.ff_hidden)?,
            out_norm: LayerNorm::new(ps, &format!("{name}.out_norm"), d)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(&self.ff1_norm.forward(x)?)? * 0.5)?)?;
        let h = self.attn_norm.forward(&x)?;
        let x = (&x + self.attn.context(&h, &h, Some(mask))?)?;
        let h = self.conv_in.forward(&self.conv_norm.forward(&x)?)?;
        let d = h.dim(D::Minus1)? / 2;
        let gated = (h.narrow(D::Minus1, 0, d)? * sigmoid(&h.narrow(D::Minus1, d, d)?)?)?;
        let h = self.depthwise.forward(&apply_mask(&gated, mask)?)?;
        let h = self.conv_out.forward(&self.conv_mid_norm.forward(&h)?.silu()?)?;
        let x = (&x + h)?;
        let x = (&x + (self.ff2.forward(&self.ff2_norm.forward(&x)?)? * 0.5)?)?;
        apply_mask(&self.out_norm.forward(&x)?, mask)
    }
}

/// Early fusion of lip context and expanded phonemes followed by conformer
/// blocks and a CTC head over `V + 1` symbols (blank last).
#[derive(Debug, Clone)]
pub struct ConformerFusion {
    fuse: Linear,
    blocks: Vec<ConformerBlock>,
    head: Linear,
    vocab: usize,
}

#[derive(Debug, Clone)]
pub struct Fused {
    /// `(B, F, d_m)`.
    pub features: Tensor,
    /// `(B, F, V + 1)` log-probabilities.
    pub log_probs: Tensor,
}

impl ConformerFusion {
    pub fn new(ps: &mut ParamStore, name: &str, vocab: usize, c: &AcousticConfig) -> Result<Self> {
        let blocks = (0..c.conformer_blocks)
            .map(|i| ConformerBlock::new(ps, &format!("{name}.block{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fuse: Linear::new(ps, &format!("{name}.fuse"), 2 * c.d_model, c.d_model)?,
            blocks,
            head: Linear::new(ps, &format!("{name}.ctc_head"), c.d_model, vocab + 1)?,
            vocab,
        })
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, context: &Tensor, expanded: &Tensor, mask: &Tensor) -> Result<Fused> {
        if context.dims() != expanded.dims() {
            return Err(Error::Shape(format!(
                "context {:?} vs expanded {:?}",
                context.dims(),
                expanded.dims()
            )));
        }
        let mut x = apply_mask(&self.fuse.forward(&Tensor::cat(&[context, expanded], D::Minus1)?)?, mask)?;
        for block in &self.blocks {
            x = block.forward(&x, mask)?;
        }
        let log_probs = log_softmax_last(&self.head.forward(&x)?)?;
        Ok(Fused { features: x, log_probs })
    }
}

/// Nearest-repeat upsampling to mel rate, two 3x3 convolutions over the
/// (time, feature) plane, style injection and projection to mel bins.
#[derive(Debug, Clone)]
pub struct SpeakerAdapter {
    conv1: Conv2d3x3,
    conv2: Conv2d3x3,
    style: StyleModulation,
    proj: Linear,
    ratio: usize,
}

impl SpeakerAdapter {
    pub fn new(ps: &mut ParamStore, name: &str, c: &AcousticConfig, ratio: usize, n_mels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d3x3::new(ps, &format!("{name}.conv1"), 1, c.adapter_channels)?,
            conv2: Conv2d3x3::new(ps, &format!("{name}.conv2"), c.adapter_channels, 1)?,
            style: StyleModulation::new(ps, &format!("{name}.style"), c.d_style, c.d_model)?,
            proj: Linear::new(ps, &format!("{name}.proj"), c.d_model, n_mels)?,
            ratio,
        })
    }

    pub fn upsample(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, d) = x.dims3()?;
        Ok(x
            .unsqueeze(2)?
            .broadcast_as((b, f, self.ratio, d))?
            .reshape((b, f * self.ratio, d))?)
    }

    /// `v_f: (B, F, d_m)` to `mu: (B, r F, d_a)`; `mel_mask` is `(B, r F)`.
    pub fn forward(&self, v_f: &Tensor, style: &Tensor, mel_mask: &Tensor) -> Result<Tensor> {
        let up = apply_mask(&self.upsample(v_f)?, mel_mask)?;
        let plane = up.unsqueeze(3)?;
        let plane_mask = mel_mask.unsqueeze(2)?.unsqueeze(3)?;
        let h = self.conv1.forward(&plane)?.silu()?.broadcast_mul(&plane_mask)?;
        let h = self.conv2.forward(&h)?.squeeze(3)?;
        let x = (up + h)?;
        let x = self.style.forward(&x, style)?;
        apply_mask(&self.proj.forward(&x)?, mel_mask)
    }

    pub fn inject_style(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        self.style.forward(x, style)
    }
}

/// Which durations expand the phoneme sequence to frame rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationSource {
    GroundTruth,
    Alignment,
}

#[derive(Debug, Clone)]
pub struct AcousticOutput {
    pub style: Tensor,
    pub o_s: Tensor,
    pub prosody: ProsodyOutput,
    pub attended: Attended,
    /// Durations from the attention weights by monotonic alignment search.
    pub mas_durations: Vec<DurationVector>,
    /// Durations actually used for expansion.
    pub durations: Vec<DurationVector>,
    pub fused: Fused,
    pub mu: Tensor,
    pub mel_lengths: Vec<usize>,
    pub mel_mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub dims: DataDims,
    pub config: AcousticConfig,
    pub speakers: SpeakerTable,
    pub phoneme_encoder: PhonemeEncoder,
    pub prosody: ProsodyAdaptor,
    pub lip_encoder: LipEncoder,
    pub aligner: LipProsodyAligner,
    pub fusion: ConformerFusion,
    pub adapter: SpeakerAdapter,
}

/// Host copy of `(B, F, P)` attention weights trimmed to each sample.
pub fn alignment_matrices(weights: &Tensor, frame_lengths: &[usize], phoneme_lengths: &[usize]) -> Result<Vec<ndarray::Array2<f64>>> {
    let host = weights.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    Ok(host
        .iter()
        .zip(frame_lengths.iter().zip(phoneme_lengths))
        .map(|(w, (&f, &p))| ndarray::Array2::from_shape_fn((f, p), |(i, j)| w[i][j]))
        .collect())
}

impl AcousticModel {
    pub fn new(ps: &mut ParamStore, dims: DataDims, config: AcousticConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            speakers: SpeakerTable::new(ps, "speakers", dims.n_speakers, c.d_style)?,
            phoneme_encoder: PhonemeEncoder::new(ps, "phoneme_encoder", dims.vocab_size, c)?,
            prosody: ProsodyAdaptor::new(ps, "prosody", c.d_model)?,
            lip_encoder: LipEncoder::new(ps, "lip_encoder", dims.lip_dim, c)?,
            aligner: LipProsodyAligner::new(ps, "lpa", c)?,
            fusion: ConformerFusion::new(ps, "fusion", dims.vocab_size, c)?,
            adapter: SpeakerAdapter::new(ps, "adapter", c, dims.mel_ratio, dims.n_mels)?,
            dims,
            config,
        })
    }

    /// Full acoustic forward pass. Teacher forcing feeds ground-truth pitch
    /// and energy into the prosody embeddings.
    pub fn forward(&self, batch: &Batch, durations: DurationSource, teacher_forcing: bool) -> Result<AcousticOutput> {
        let style = self.speakers.lookup(&batch.speakers)?;
        let o_s = self.phoneme_encoder.forward(&batch.phonemes, &style, &batch.phoneme_mask)?;
        let targets = teacher_forcing.then_some((&batch.pitch, &batch.energy));
        let prosody = self.prosody.forward(&o_s, &batch.phoneme_mask, targets)?;
        let lip = self.lip_encoder.forward(&batch.lips, &batch.frame_mask)?;
        let attended = self.aligner.forward(
            &lip,
            &batch.frame_lengths,
            &prosody.o_p,
            &batch.phoneme_lengths,
            &batch.phoneme_mask,
        )?;
        let mas_durations = alignment_matrices(&attended.weights, &batch.frame_lengths, &batch.phoneme_lengths)?
            .iter()
            .map(|w| mas(w.view()))
            .collect::<Result<Vec<_>>>()?;
        let used = match durations {
            DurationSource::GroundTruth => batch.durations.clone(),
            DurationSource::Alignment => mas_durations.clone(),
        };
        let f_max = batch.frame_mask.dim(1)?;
        let expanded = length_regulate_tensor(&prosody.o_p, &used)?;
        let expanded = if expanded.dim(1)? < f_max {
            expanded.pad_with_zeros(1, 0, f_max - expanded.dim(1)?)?
        } else {
            expanded
        };
        let fused = self.fusion.forward(&attended.context, &expanded, &batch.frame_mask)?;
        let mel_lengths: Vec<usize> = used.iter().map(|d| d.total() * self.dims.mel_ratio).collect();
        let mel_mask = length_mask(&mel_lengths, f_max * self.dims.mel_ratio, style.dtype(), style.device())?;
        let mu = self.adapter.forward(&fused.features, &style, &mel_mask)?;
        Ok(AcousticOutput {
            style,
            o_s,
            prosody,
            attended,
            mas_durations,
            durations: used,
            fused,
            mu,
            mel_lengths,
            mel_mask,
        })
    }

    pub fn contrastive_loss(&self, out: &AcousticOutput, batch: &Batch) -> Result<Tensor> {
        contrastive_loss_tensor(
            &out.attended.weights,
            &batch.gt_alignment,
            &batch.pair_mask,
            self.config.tau,
            self.config.temperature_mode,
        )
    }

    pub fn ctc_loss(&self, out: &AcousticOutput, batch: &Batch) -> Result<Tensor> {
        ctc_loss(&out.fused.log_probs, &batch.frame_lengths, &batch.targets, self.fusion.blank())
    }
}
