//! Padded mini-batches assembled from corpus samples.

use candle_core::{DType, Device, Tensor};

use crate::align::build_gt_mask;
use crate::error::{Error, Result};
use crate::nn::length_mask;
use crate::types::{CorpusSample, DurationVector};

/// Every tensor a forward pass or loss needs, padded to the batch maximum.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, P)` phoneme ids; padding uses id 0.
    pub phonemes: Tensor,
    pub phoneme_lengths: Vec<usize>,
    /// `(B, P)`.
    pub phoneme_mask: Tensor,
    /// `(B, F, d_lip)`.
    pub lips: Tensor,
    pub frame_lengths: Vec<usize>,
    /// `(B, F)`.
    pub frame_mask: Tensor,
    /// `(B,)` speaker ids.
    pub speakers: Tensor,
    pub speaker_ids: Vec<usize>,
    pub emotions: Vec<usize>,
    pub durations: Vec<DurationVector>,
    pub targets: Vec<Vec<u32>>,
    /// `(B, F, P)` ground-truth frame-to-phoneme masks.
    pub gt_alignment: Tensor,
    /// `(B, F, P)` valid (frame, phoneme) pairs.
    pub pair_mask: Tensor,
    /// `(B, P)` per-phoneme targets.
    pub pitch: Tensor,
    pub energy: Tensor,
    /// `(B, M, d_a)` target mels.
    pub mel: Tensor,
    pub mel_lengths: Vec<usize>,
    /// `(B, M)`.
    pub mel_mask: Tensor,
}

fn pad_rows(rows: &ndarray::Array2<f32>, len: usize) -> Vec<f32> {
    let width = rows.ncols();
    let mut out = Vec::with_capacity(len * width);
    out.extend(rows.iter().copied());
    out.resize(len * width, 0.0);
    out
}

impl Batch {
    pub fn from_samples(samples: &[&CorpusSample], dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let b = samples.len();
        if b == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let p_max = samples.iter().map(|s| s.n_phonemes()).max().unwrap();
        let f_max = samples.iter().map(|s| s.n_frames()).max().unwrap();
        let m_max = samples.iter().map(|s| s.mel.nrows()).max().unwrap();
        let d_lip = samples[0].lips.ncols();
        let d_a = samples[0].mel.ncols();

        let mut phonemes = Vec::with_capacity(b * p_max);
        let mut lips = Vec::with_capacity(b * f_max * d_lip);
        let mut mel = Vec::with_capacity(b * m_max * d_a);
        let mut gt = vec![0f32; b * f_max * p_max];
        let mut pair = vec![0f32; b * f_max * p_max];
        let mut pitch = vec![0f32; b * p_max];
        let mut energy = vec![0f32; b * p_max];
        for (i, s) in samples.iter().enumerate() {
            if s.lips.ncols() != d_lip || s.mel.ncols() != d_a {
                return Err(Error::Shape("samples disagree on feature widths".into()));
            }
            let p = s.n_phonemes();
            let f = s.n_frames();
            phonemes.extend(s.phonemes.ids().iter().copied());
            phonemes.resize((i + 1) * p_max, 0);
            lips.extend(pad_rows(&s.lips, f_max));
            mel.extend(pad_rows(&s.mel, m_max));
            let mask = build_gt_mask(&s.gt_durations);
            for fr in 0..f {
                for ph in 0..p {
                    let idx = (i * f_max + fr) * p_max + ph;
                    gt[idx] = mask.view()[[fr, ph]] as f32;
                    pair[idx] = 1.0;
                }
            }
            pitch[i * p_max..i * p_max + p].copy_from_slice(&s.pitch);
            energy[i * p_max..i * p_max + p].copy_from_slice(&s.energy);
        }
        let phoneme_lengths: Vec<usize> = samples.iter().map(|s| s.n_phonemes()).collect();
        let frame_lengths: Vec<usize> = samples.iter().map(|s| s.n_frames()).collect();
        let mel_lengths: Vec<usize> = samples.iter().map(|s| s.mel.nrows()).collect();
        let speaker_ids: Vec<usize> = samples.iter().map(|s| s.speaker).collect();
        let cast = |v: Vec<f32>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, &device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            phonemes: Tensor::from_vec(phonemes, (b, p_max), &device)?,
            phoneme_mask: length_mask(&phoneme_lengths, p_max, dtype, &device)?,
            phoneme_lengths,
            lips: cast(lips, &[b, f_max, d_lip])?,
            frame_mask: length_mask(&frame_lengths, f_max, dtype, &device)?,
            frame_lengths,
            speakers: Tensor::from_vec(
                speaker_ids.iter().map(|&s| s as u32).collect::<Vec<_>>(),
                b,
                &device,
            )?,
            speaker_ids,
            emotions: samples.iter().map(|s| s.emotion).collect(),
            durations: samples.iter().map(|s| s.gt_durations.clone()).collect(),
            targets: samples.iter().map(|s| s.phonemes.ids().to_vec()).collect(),
            gt_alignment: cast(gt, &[b, f_max, p_max])?,
            pair_mask: cast(pair, &[b, f_max, p_max])?,
            pitch: cast(pitch, &[b, p_max])?,
            energy: cast(energy, &[b, p_max])?,
            mel: cast(mel, &[b, m_max, d_a])?,
            mel_mask: length_mask(&mel_lengths, m_max, dtype, &device)?,
            mel_lengths,
        })
    }

    pub fn size(&self) -> usize {
        self.phoneme_lengths.len()
    }
}

/// Padded mels and their frame mask.
#[derive(Debug, Clone)]
pub struct MelBatch {
    /// `(B, M, d_a)`.
    pub mel: Tensor,
    /// `(B, M)`.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl MelBatch {
    pub fn from_mels(mels: &[&ndarray::Array2<f32>], dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        if mels.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let m_max = mels.iter().map(|m| m.nrows()).max().unwrap();
        let d = mels[0].ncols();
        if mels.iter().any(|m| m.ncols() != d) {
            return Err(Error::Shape("mels disagree on bin count".into()));
        }
        let mut data = Vec::with_capacity(mels.len() * m_max * d);
        for m in mels {
            data.extend(pad_rows(m, m_max));
        }
        let lengths: Vec<usize> = mels.iter().map(|m| m.nrows()).collect();
        Ok(Self {
            mel: Tensor::from_vec(data, (mels.len(), m_max, d), &device)?.to_dtype(dtype)?,
            mask: length_mask(&lengths, m_max, dtype, &device)?,
            lengths,
        })
    }
}

/// Splits a `(B, M, d)` tensor back into per-example `(len, d)` matrices.
pub fn unpad(x: &Tensor, lengths: &[usize]) -> Result<Vec<ndarray::Array2<f32>>> {
    let host = x.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    Ok(host
        .into_iter()
        .zip(lengths)
        .map(|(rows, &len)| {
            let d = rows.first().map_or(0, |r| r.len());
            let flat: Vec<f32> = rows.into_iter().take(len).flatten().collect();
            ndarray::Array2::from_shape_vec((len, d), flat).expect("consistent widths")
        })
        .collect())
}
