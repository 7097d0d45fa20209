//! Domain types shared by the corpus, the model and the evaluation code.
//!
//! All host-side arrays are row-major `ndarray` matrices with time on the
//! first axis.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phoneme ids, each in `[0, vocab)`, never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence(Vec<u32>);

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("phoneme sequence is empty".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Invalid(format!(
                "phoneme id {bad} outside vocabulary of size {vocab}"
            )));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Video frames per phoneme. Every entry is at least one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DurationVector(Vec<u32>);

impl DurationVector {
    pub fn new(durations: Vec<u32>) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::Invalid("duration vector is empty".into()));
        }
        if durations.contains(&0) {
            return Err(Error::Invalid("zero duration".into()));
        }
        Ok(Self(durations))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// Number of phonemes.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of frames covered, `sum(d)`.
    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }

    /// Phoneme index owning each frame.
    pub fn frame_owners(&self) -> Vec<usize> {
        let mut owners = Vec::with_capacity(self.total());
        for (i, &d) in self.0.iter().enumerate() {
            owners.extend(std::iter::repeat_n(i, d as usize));
        }
        owners
    }
}

/// User emotion control: target class plus positive and negative scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionInstruction {
    pub class: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl EmotionInstruction {
    pub fn new(class: usize, alpha: f64, beta: f64, n_classes: usize) -> Result<Self> {
        let instruction = Self { class, alpha, beta };
        instruction.validate(n_classes)?;
        Ok(instruction)
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.class >= n_classes {
            return Err(Error::Invalid(format!(
                "emotion id {} is not one of 0..{}",
                self.class, n_classes
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A row of the learned speaker table.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub id: usize,
    pub vector: Vec<f32>,
}

/// One synthetic utterance.
///
/// `lips` is `F x d_lip`, `mel` is `(r * F) x d_a`; `pitch` and `energy`
/// carry one value per phoneme.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub phonemes: PhonemeSequence,
    pub gt_durations: DurationVector,
    pub lips: Array2<f32>,
    pub mel: Array2<f32>,
    pub speaker: usize,
    pub emotion: usize,
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
}

impl CorpusSample {
    pub fn n_frames(&self) -> usize {
        self.lips.nrows()
    }

    pub fn n_phonemes(&self) -> usize {
        self.phonemes.len()
    }
}

/// Number of mel frames per video frame, `sample_rate / (hop_length * fps)`.
///
/// Only exact integer ratios are accepted.
pub fn mel_ratio(sample_rate: u32, hop_length: u32, fps: u32) -> Result<usize> {
    if sample_rate == 0 || hop_length == 0 || fps == 0 {
        return Err(Error::Config(format!(
            "sample_rate ({sample_rate}), hop_length ({hop_length}) and fps ({fps}) must be positive"
        )));
    }
    let denom = hop_length as u64 * fps as u64;
    if !(sample_rate as u64).is_multiple_of(denom) {
        return Err(Error::Config(format!(
            "sample_rate ({sample_rate}) / (hop_length ({hop_length}) * fps ({fps})) is not an integer"
        )));
    }
    Ok((sample_rate as u64 / denom) as usize)
}

/// Dimensions a sample is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleShape {
    pub vocab_size: usize,
    pub n_emotions: usize,
    pub n_speakers: usize,
    pub lip_dim: usize,
    pub n_mels: usize,
    pub mel_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Name of the domain type whose invariant failed.
    pub subject: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, subject: &'static str, message: String) {
        self.violations.push(Violation { subject, message });
    }
}

/// Lists every violated invariant of `sample`. Never fails.
pub fn validate_sample(sample: &CorpusSample, shape: &SampleShape) -> ValidationReport {
    let mut report = ValidationReport::default();
    let p = sample.phonemes.len();
    let f = sample.lips.nrows();

    if p == 0 {
        report.push("PhonemeSequence", "empty phoneme sequence".into());
    }
    if let Some(bad) = sample
        .phonemes
        .ids()
        .iter()
        .find(|&&id| id as usize >= shape.vocab_size)
    {
        report.push(
            "PhonemeSequence",
            format!("id {bad} outside vocabulary of size {}", shape.vocab_size),
        );
    }

    if sample.gt_durations.len() != p {
        report.push(
            "DurationVector",
            format!("{} durations for {p} phonemes", sample.gt_durations.len()),
        );
    }
    if sample.gt_durations.total() != f {
        report.push(
            "DurationVector",
            format!(
                "durations sum to {} but there are {f} video frames",
                sample.gt_durations.total()
            ),
        );
    }

    if f < p {
        report.push(
            "LipFeatureSequence",
            format!("{f} frames is fewer than {p} phonemes"),
        );
    }
    if sample.lips.ncols() != shape.lip_dim {
        report.push(
            "LipFeatureSequence",
            format!("feature width {} != {}", sample.lips.ncols(), shape.lip_dim),
        );
    }
    if sample.lips.iter().any(|v| !v.is_finite()) {
        report.push("LipFeatureSequence", "non-finite value".into());
    }

    let expected_mel = shape.mel_ratio * f;
    if sample.mel.nrows() != expected_mel {
        report.push(
            "MelSpectrogram",
            format!(
                "{} mel frames, expected {} x {f} = {expected_mel}",
                sample.mel.nrows(),
                shape.mel_ratio
            ),
        );
    }
    if sample.mel.ncols() != shape.n_mels {
        report.push(
            "MelSpectrogram",
            format!("{} mel bins, expected {}", sample.mel.ncols(), shape.n_mels),
        );
    }
    if sample.mel.iter().any(|v| !v.is_finite()) {
        report.push("MelSpectrogram", "non-finite value".into());
    }

    if sample.speaker >= shape.n_speakers {
        report.push(
            "SpeakerEmbedding",
            format!("speaker {} of {}", sample.speaker, shape.n_speakers),
        );
    }
    if sample.emotion >= shape.n_emotions {
        report.push(
            "EmotionInstruction",
            format!("emotion {} of {}", sample.emotion, shape.n_emotions),
        );
    }
    for (name, values) in [("pitch", &sample.pitch), ("energy", &sample.energy)] {
        if values.len() != p {
            report.push(
                "ProsodySequence",
                format!("{name} has {} values for {p} phonemes", values.len()),
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            report.push("ProsodySequence", format!("non-finite {name}"));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> SampleShape {
        SampleShape {
            vocab_size: 8,
            n_emotions: 3,
            n_speakers: 2,
            lip_dim: 4,
            n_mels: 5,
            mel_ratio: 4,
        }
    }

    fn sample(durations: Vec<u32>, frames: usize, mel_frames: usize) -> CorpusSample {
        let p = durations.len();
        CorpusSample {
            phonemes: PhonemeSequence::new((0..p as u32).collect(), 8).unwrap(),
            gt_durations: DurationVector::new(durations).unwrap(),
            lips: Array2::zeros((frames, 4)),
            mel: Array2::zeros((mel_frames, 5)),
            speaker: 1,
            emotion: 2,
            pitch: vec![0.0; p],
            energy: vec![0.0; p],
        }
    }

    #[test]
    fn mel_ratio_examples() {
        assert_eq!(mel_ratio(16000, 160, 25).unwrap(), 4);
        assert_eq!(mel_ratio(16000, 160, 50).unwrap(), 2);
        let err = mel_ratio(16000, 333, 25).unwrap_err().to_string();
        assert!(err.contains("16000") && err.contains("333") && err.contains("25"));
        assert!(mel_ratio(0, 160, 25).is_err());
    }

    #[test]
    fn consistent_sample_has_empty_report() {
        let s = sample(vec![3, 2, 3], 8, 32);
        assert!(validate_sample(&s, &shape()).is_empty());
    }

    #[test]
    fn duration_sum_mismatch_names_duration_vector() {
        let s = sample(vec![3, 2, 2], 8, 32);
        let report = validate_sample(&s, &shape());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].subject, "DurationVector");
    }

    #[test]
    fn mel_length_off_by_one_names_mel() {
        let s = sample(vec![3, 2, 3], 8, 33);
        let report = validate_sample(&s, &shape());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].subject, "MelSpectrogram");
    }

    #[test]
    fn validation_is_total_on_garbage() {
        let mut s = sample(vec![1], 0, 7);
        s.lips = Array2::from_elem((0, 9), f32::NAN);
        s.mel = Array2::from_elem((7, 2), f32::INFINITY);
        s.pitch = vec![f32::NAN; 4];
        s.speaker = 99;
        let report = validate_sample(&s, &shape());
        assert!(report.violations.len() >= 6);
    }

    #[test]
    fn instruction_validation() {
        assert!(EmotionInstruction::new(2, 3.5, 0.3, 7).is_ok());
        assert!(EmotionInstruction::new(7, 1.0, 0.0, 7).is_err());
        assert!(EmotionInstruction::new(0, -1.0, 0.0, 7).is_err());
        assert!(EmotionInstruction::new(0, 1.0, f64::NAN, 7).is_err());
    }

    #[test]
    fn frame_owners_follow_durations() {
        let d = DurationVector::new(vec![2, 1, 3]).unwrap();
        assert_eq!(d.frame_owners(), vec![0, 0, 1, 2, 2, 2]);
        assert!(DurationVector::new(vec![1, 0]).is_err());
    }
}
