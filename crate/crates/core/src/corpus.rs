//! Deterministic synthetic dubbing corpus.
//!
//! Every utterance is rendered from fixed random tables: a spectral envelope
//! per speaker, a formant pattern and a lip "viseme" vector per phoneme, and
//! one [`EmotionSignature`] per emotion. An emotion only ever changes mel
//! bins inside its own band, which gives guided synthesis a measurable
//! target.
//!
//! On disk a corpus is a directory holding `manifest.json` and one
//! safetensors file per sample under `samples/`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{json_hash, sha256_hex, write_atomic, ArrayFile, NamedArray};
use crate::types::{
    mel_ratio, validate_sample, CorpusSample, DurationVector, PhonemeSequence, SampleShape,
};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BAND_MARGIN: usize = 8;
const MODULATION_DEPTH: f64 = 0.3;

const TABLE_STREAM: u64 = 0;
const EMOTION_STREAM: u64 = 1 << 32;
const SAMPLE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub n_emotions: usize,
    pub n_speakers: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Per-phoneme duration range in video frames, inclusive.
    pub min_duration: u32,
    pub max_duration: u32,
    pub sample_rate: u32,
    pub hop_length: u32,
    pub fps: u32,
    pub n_mels: usize,
    pub lip_dim: usize,
    /// Gaussian noise added to every mel bin.
    pub noise_std: f64,
    pub lip_noise_std: f64,
    /// Peak amplitude of the emotion band signal.
    pub emotion_gain: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            n_emotions: 7,
            n_speakers: 4,
            min_phonemes: 3,
            max_phonemes: 8,
            min_duration: 1,
            max_duration: 6,
            sample_rate: 16_000,
            hop_length: 160,
            fps: 25,
            n_mels: 80,
            lip_dim: 64,
            noise_std: 0.1,
            lip_noise_std: 0.1,
            emotion_gain: 1.5,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.n_emotions < 2 {
            return fail(format!("n_emotions must be >= 2, got {}", self.n_emotions));
        }
        if self.n_speakers < 1 {
            return fail("n_speakers must be >= 1".into());
        }
        if self.min_phonemes < 1 || self.max_phonemes < self.min_phonemes {
            return fail(format!(
                "phoneme range [{}, {}] is invalid",
                self.min_phonemes, self.max_phonemes
            ));
        }
        if self.min_duration < 1 || self.max_duration > 6 || self.max_duration < self.min_duration
        {
            return fail(format!(
                "duration range [{}, {}] must lie within [1, 6]",
                self.min_duration, self.max_duration
            ));
        }
        if !(self.noise_std >= 0.0 && self.lip_noise_std >= 0.0 && self.emotion_gain >= 0.0) {
            return fail("noise levels and emotion_gain must be >= 0".into());
        }
        if self.lip_dim == 0 {
            return fail("lip_dim must be positive".into());
        }
        mel_ratio(self.sample_rate, self.hop_length, self.fps)?;
        if self.n_mels < 2 * BAND_MARGIN + 2 * self.n_emotions {
            return fail(format!(
                "{} mel bins cannot hold {} disjoint emotion bands",
                self.n_mels, self.n_emotions
            ));
        }
        Ok(())
    }

    pub fn mel_ratio(&self) -> Result<usize> {
        mel_ratio(self.sample_rate, self.hop_length, self.fps)
    }

    pub fn sample_shape(&self) -> Result<SampleShape> {
        Ok(SampleShape {
            vocab_size: self.vocab_size,
            n_emotions: self.n_emotions,
            n_speakers: self.n_speakers,
            lip_dim: self.lip_dim,
            n_mels: self.n_mels,
            mel_ratio: self.mel_ratio()?,
        })
    }

    pub fn hash(&self) -> Result<String> {
        json_hash(self)
    }
}

/// Planted acoustic signature of one emotion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionSignature {
    /// First mel bin of the band.
    pub band_start: usize,
    pub band_width: usize,
    /// Linear slope across the band, in units of the band gain.
    pub tilt: f64,
    /// Mel frames per modulation cycle.
    pub modulation_rate: f64,
    pub pitch_offset: f64,
    pub energy_offset: f64,
}

impl EmotionSignature {
    pub fn band(&self) -> std::ops::Range<usize> {
        self.band_start..self.band_start + self.band_width
    }

    fn value(&self, gain: f64, frame: usize, bin: usize) -> f64 {
        let u = if self.band_width > 1 {
            2.0 * (bin - self.band_start) as f64 / (self.band_width - 1) as f64 - 1.0
        } else {
            0.0
        };
        let phase = 2.0 * PI * frame as f64 / self.modulation_rate;
        gain * (1.0 + self.tilt * u) * (1.0 + MODULATION_DEPTH * phase.sin())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Band layout for `n` emotions over `n_mels` bins; bands are disjoint.
pub fn emotion_bands(n_mels: usize, n: usize) -> Vec<(usize, usize)> {
    let slot = (n_mels - 2 * BAND_MARGIN) / n;
    let width = (slot * 2 / 3).max(1);
    (0..n).map(|e| (BAND_MARGIN + e * slot, width)).collect()
}

/// Fixed random tables every sample is rendered from.
#[derive(Debug, Clone)]
pub struct CorpusTables {
    pub speaker_envelopes: Array2<f64>,
    pub formants: Array2<f64>,
    pub visemes: Array2<f64>,
    pub articulation: Vec<f64>,
    pub harmonic: Vec<f64>,
    /// `vocab x speakers`.
    pub base_pitch: Array2<f64>,
    pub base_energy: Array2<f64>,
    pub signatures: Vec<EmotionSignature>,
}

impl CorpusTables {
    pub fn new(config: &CorpusConfig) -> Self {
        let d_a = config.n_mels;
        let mut rng = stream_rng(config.seed, TABLE_STREAM);

        let mut speaker_envelopes = Array2::zeros((config.n_speakers, d_a));
        for mut row in speaker_envelopes.rows_mut() {
            let offset = rng.random_range(-0.5..0.5);
            let terms: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(-0.8..0.8), rng.random_range(0.0..2.0 * PI)))
                .collect();
            for (b, v) in row.iter_mut().enumerate() {
                *v = offset
                    + terms
                        .iter()
                        .enumerate()
                        .map(|(k, &(a, phi))| {
                            a * (PI * (k + 1) as f64 * b as f64 / d_a as f64 + phi).cos()
                        })
                        .sum::<f64>();
            }
        }

        let mut formants = Array2::zeros((config.vocab_size, d_a));
        for mut row in formants.rows_mut() {
            for _ in 0..3 {
                let center = rng.random_range(0.0..d_a as f64);
                let width: f64 = rng.random_range(1.5..3.5);
                let amp = rng.random_range(1.0..2.5);
                for (b, v) in row.iter_mut().enumerate() {
                    let z = (b as f64 - center) / width;
                    *v += amp * (-0.5 * z * z).exp();
                }
            }
        }

        let mut visemes = Array2::zeros((config.vocab_size, config.lip_dim));
        visemes.iter_mut().for_each(|v| *v = normal(&mut rng));
        let articulation: Vec<f64> = (0..config.lip_dim).map(|_| normal(&mut rng)).collect();

        let mut base_pitch = Array2::zeros((config.vocab_size, config.n_speakers));
        base_pitch.iter_mut().for_each(|v| *v = normal(&mut rng));
        let mut base_energy = Array2::zeros((config.vocab_size, config.n_speakers));
        base_energy.iter_mut().for_each(|v| *v = normal(&mut rng));

        let harmonic = (0..d_a)
            .map(|b| (2.0 * PI * b as f64 / 8.0).cos() * (-(b as f64) / 40.0).exp())
            .collect();

        let signatures = emotion_bands(d_a, config.n_emotions)
            .into_iter()
            .enumerate()
            .map(|(e, (band_start, band_width))| {
                let mut rng = stream_rng(config.seed, EMOTION_STREAM + e as u64);
                EmotionSignature {
                    band_start,
                    band_width,
                    tilt: rng.random_range(-0.5..0.5),
                    modulation_rate: rng.random_range(4.0..12.0),
                    pitch_offset: 0.5 * normal(&mut rng),
                    energy_offset: 0.5 * normal(&mut rng),
                }
            })
            .collect();

        Self {
            speaker_envelopes,
            formants,
            visemes,
            articulation,
            harmonic,
            base_pitch,
            base_energy,
            signatures,
        }
    }
}

/// Renders samples for one [`CorpusConfig`].
#[derive(Debug, Clone)]
pub struct CorpusGenerator {
    config: CorpusConfig,
    ratio: usize,
    tables: CorpusTables,
}

impl CorpusGenerator {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        config.validate()?;
        let ratio = config.mel_ratio()?;
        let tables = CorpusTables::new(&config);
        Ok(Self {
            config,
            ratio,
            tables,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn tables(&self) -> &CorpusTables {
        &self.tables
    }

    pub fn signatures(&self) -> &[EmotionSignature] {
        &self.tables.signatures
    }

    /// Per-phoneme pitch and energy targets.
    pub fn prosody(&self, phonemes: &[u32], speaker: usize, emotion: usize) -> (Vec<f32>, Vec<f32>) {
        let sig = &self.tables.signatures[emotion];
        phonemes
            .iter()
            .map(|&ph| {
                let ph = ph as usize;
                (
                    (self.tables.base_pitch[[ph, speaker]] + sig.pitch_offset) as f32,
                    (self.tables.base_energy[[ph, speaker]] + sig.energy_offset) as f32,
                )
            })
            .unzip()
    }

    /// Mel frames for the given content. `noise` supplies the additive
    /// Gaussian noise; it is not drawn from when `noise_std` is zero.
    pub fn render_mel(
        &self,
        phonemes: &PhonemeSequence,
        durations: &DurationVector,
        speaker: usize,
        emotion: usize,
        noise: &mut impl Rng,
    ) -> Result<Array2<f32>> {
        if phonemes.len() != durations.len() {
            return Err(Error::Shape(format!(
                "{} phonemes but {} durations",
                phonemes.len(),
                durations.len()
            )));
        }
        if speaker >= self.config.n_speakers || emotion >= self.config.n_emotions {
            return Err(Error::Invalid(format!(
                "speaker {speaker} / emotion {emotion} out of range"
            )));
        }
        let d_a = self.config.n_mels;
        let t = &self.tables;
        let sig = &t.signatures[emotion];
        let band = sig.band();
        let mut mel = Array2::zeros((self.ratio * durations.total(), d_a));
        let mut frame = 0;
        for (&ph, &d) in phonemes.ids().iter().zip(durations.as_slice()) {
            let ph = ph as usize;
            let energy = t.base_energy[[ph, speaker]];
            let pitch = t.base_pitch[[ph, speaker]];
            for _ in 0..self.ratio * d as usize {
                let mut row = mel.row_mut(frame);
                for b in 0..d_a {
                    let mut v = t.speaker_envelopes[[speaker, b]]
                        + (1.0 + 0.25 * energy) * t.formants[[ph, b]]
                        + 0.3 * pitch * t.harmonic[b];
                    if band.contains(&b) {
                        v += sig.value(self.config.emotion_gain, frame, b);
                    }
                    if self.config.noise_std > 0.0 {
                        v += self.config.noise_std * normal(noise);
                    }
                    row[b] = v as f32;
                }
                frame += 1;
            }
        }
        Ok(mel)
    }

    fn render_lips(
        &self,
        phonemes: &PhonemeSequence,
        durations: &DurationVector,
        rng: &mut impl Rng,
    ) -> Array2<f32> {
        let t = &self.tables;
        let mut lips = Array2::zeros((durations.total(), self.config.lip_dim));
        let mut frame = 0;
        for (&ph, &d) in phonemes.ids().iter().zip(durations.as_slice()) {
            for i in 0..d as usize {
                let opening = 0.5 * (PI * (i as f64 + 0.5) / d as f64).sin();
                let mut row = lips.row_mut(frame);
                for (k, v) in row.iter_mut().enumerate() {
                    let mut x = t.visemes[[ph as usize, k]] + opening * t.articulation[k];
                    if self.config.lip_noise_std > 0.0 {
                        x += self.config.lip_noise_std * normal(rng);
                    }
                    *v = x as f32;
                }
                frame += 1;
            }
        }
        lips
    }

    /// Sample `index` of the corpus; independent of every other index.
    pub fn sample(&self, index: usize) -> Result<CorpusSample> {
        let c = &self.config;
        let mut rng = stream_rng(c.seed, SAMPLE_STREAM + index as u64);
        let p = rng.random_range(c.min_phonemes..=c.max_phonemes);
        let mut ids = Vec::with_capacity(p);
        while ids.len() < p {
            let id = rng.random_range(0..c.vocab_size as u32);
            if ids.last() != Some(&id) {
                ids.push(id);
            }
        }
        let durations: Vec<u32> = (0..p)
            .map(|_| rng.random_range(c.min_duration..=c.max_duration))
            .collect();
        let speaker = rng.random_range(0..c.n_speakers);
        let emotion = rng.random_range(0..c.n_emotions);

        let phonemes = PhonemeSequence::new(ids, c.vocab_size)?;
        let gt_durations = DurationVector::new(durations)?;
        let lips = self.render_lips(&phonemes, &gt_durations, &mut rng);
        let mel = self.render_mel(&phonemes, &gt_durations, speaker, emotion, &mut rng)?;
        let (pitch, energy) = self.prosody(phonemes.ids(), speaker, emotion);
        Ok(CorpusSample {
            phonemes,
            gt_durations,
            lips,
            mel,
            speaker,
            emotion,
            pitch,
            energy,
        })
    }

    pub fn generate(&self, count: usize) -> Result<Vec<CorpusSample>> {
        if count == 0 {
            return Err(Error::Config("count must be >= 1".into()));
        }
        (0..count).map(|i| self.sample(i)).collect()
    }
}

/// Generates `count` samples; a pure function of `(config, count)`.
pub fn generate_corpus(config: &CorpusConfig, count: usize) -> Result<Vec<CorpusSample>> {
    CorpusGenerator::new(config.clone())?.generate(count)
}

/// Mean mel value inside each emotion band, one entry per emotion.
pub fn band_energies(mel: &Array2<f32>, signatures: &[EmotionSignature]) -> Vec<f64> {
    signatures
        .iter()
        .map(|s| {
            let band = mel.slice(ndarray::s![.., s.band()]);
            band.iter().map(|&v| v as f64).sum::<f64>() / band.len().max(1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub count: usize,
    pub config_hash: String,
    pub config: CorpusConfig,
    samples: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn checksums(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.sha256.as_str()).collect()
    }
}

/// A corpus as read back from disk.
#[derive(Debug, Clone)]
pub struct StoredCorpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<CorpusSample>,
}

fn sample_to_file(sample: &CorpusSample, seed: u64, index: usize) -> ArrayFile {
    let mut file = ArrayFile::default();
    let p = sample.phonemes.len();
    file.insert("phonemes", NamedArray::u32(vec![p], sample.phonemes.ids().to_vec()));
    file.insert(
        "durations",
        NamedArray::u32(vec![p], sample.gt_durations.as_slice().to_vec()),
    );
    let (f, dl) = sample.lips.dim();
    file.insert("lips", NamedArray::f32(vec![f, dl], sample.lips.iter().copied().collect()));
    let (m, da) = sample.mel.dim();
    file.insert("mel", NamedArray::f32(vec![m, da], sample.mel.iter().copied().collect()));
    file.insert("pitch", NamedArray::f32(vec![p], sample.pitch.clone()));
    file.insert("energy", NamedArray::f32(vec![p], sample.energy.clone()));
    file.insert("speaker", NamedArray::u32(vec![1], vec![sample.speaker as u32]));
    file.insert("emotion", NamedArray::u32(vec![1], vec![sample.emotion as u32]));
    file.metadata.insert("seed".into(), seed.to_string());
    file.metadata.insert("index".into(), index.to_string());
    file
}

fn matrix(file: &ArrayFile, name: &str) -> Result<Array2<f32>> {
    let a = file.get(name)?;
    let data = a
        .as_f32()
        .ok_or_else(|| Error::Invalid(format!("`{name}` is not f32")))?;
    if a.shape.len() != 2 {
        return Err(Error::Invalid(format!("`{name}` is not a matrix")));
    }
    Array2::from_shape_vec((a.shape[0], a.shape[1]), data.to_vec())
        .map_err(|e| Error::Invalid(format!("`{name}`: {e}")))
}

fn u32s<'a>(file: &'a ArrayFile, name: &str) -> Result<&'a [u32]> {
    file.get(name)?
        .as_u32()
        .ok_or_else(|| Error::Invalid(format!("`{name}` is not u32")))
}

fn f32s(file: &ArrayFile, name: &str) -> Result<Vec<f32>> {
    Ok(file
        .get(name)?
        .as_f32()
        .ok_or_else(|| Error::Invalid(format!("`{name}` is not f32")))?
        .to_vec())
}

fn scalar(file: &ArrayFile, name: &str) -> Result<usize> {
    u32s(file, name)?
        .first()
        .map(|&v| v as usize)
        .ok_or_else(|| Error::Invalid(format!("`{name}` is empty")))
}

fn sample_from_file(file: &ArrayFile, config: &CorpusConfig) -> Result<CorpusSample> {
    Ok(CorpusSample {
        phonemes: PhonemeSequence::new(u32s(file, "phonemes")?.to_vec(), config.vocab_size)?,
        gt_durations: DurationVector::new(u32s(file, "durations")?.to_vec())?,
        lips: matrix(file, "lips")?,
        mel: matrix(file, "mel")?,
        speaker: scalar(file, "speaker")?,
        emotion: scalar(file, "emotion")?,
        pitch: f32s(file, "pitch")?,
        energy: f32s(file, "energy")?,
    })
}

/// Writes `samples` under `dir`; the manifest is written last.
pub fn save_corpus(samples: &[CorpusSample], config: &CorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir.join("samples"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let rel = format!("samples/{i:06}.safetensors");
        let bytes = sample_to_file(sample, config.seed, i).to_bytes()?;
        write_atomic(&dir.join(&rel), &bytes)?;
        entries.push(ManifestEntry {
            file: rel,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        seed: config.seed,
        count: samples.len(),
        config_hash: config.hash()?,
        config: config.clone(),
        samples: entries,
    };
    write_atomic(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST);
    let value: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt {
            path: path.clone(),
            reason: "missing format_version".into(),
        })? as u32;
    if found != CORPUS_FORMAT_VERSION {
        return Err(Error::Version {
            path,
            expected: CORPUS_FORMAT_VERSION,
            found,
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Reads and verifies a corpus. Any checksum, seed or invariant failure
/// rejects the whole corpus.
pub fn load_corpus(dir: &Path) -> Result<StoredCorpus> {
    let manifest = read_manifest(dir)?;
    let shape = manifest.config.sample_shape()?;
    if manifest.samples.len() != manifest.count {
        return Err(Error::Corrupt {
            path: dir.join(MANIFEST),
            reason: format!(
                "count {} but {} entries",
                manifest.count,
                manifest.samples.len()
            ),
        });
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for entry in &manifest.samples {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum(path));
        }
        let file = ArrayFile::from_bytes(&bytes)?;
        let seed = file.metadata.get("seed").and_then(|s| s.parse::<u64>().ok());
        if seed != Some(manifest.seed) {
            return Err(Error::Corrupt {
                path,
                reason: format!(
                    "payload seed {seed:?} does not match manifest seed {}",
                    manifest.seed
                ),
            });
        }
        let sample = sample_from_file(&file, &manifest.config)?;
        let report = validate_sample(&sample, &shape);
        if let Some(v) = report.violations.first() {
            return Err(Error::Corrupt {
                path,
                reason: format!("{}: {}", v.subject, v.message),
            });
        }
        samples.push(sample);
    }
    Ok(StoredCorpus { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 1,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small(), 3).unwrap();
        let b = generate_corpus(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusConfig { seed: 2, ..small() }, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_are_valid_and_cover_emotions() {
        let config = small();
        let shape = config.sample_shape().unwrap();
        let corpus = generate_corpus(&config, 200).unwrap();
        let mut seen = [false; 7];
        for s in &corpus {
            assert!(validate_sample(s, &shape).is_empty());
            assert!(s.emotion < 7);
            seen[s.emotion] = true;
            assert!(s.phonemes.ids().windows(2).all(|w| w[0] != w[1]));
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn bands_are_disjoint() {
        let bands = emotion_bands(80, 7);
        for w in bands.windows(2) {
            assert!(w[0].0 + w[0].1 <= w[1].0);
        }
        assert!(bands.last().map(|b| b.0 + b.1 <= 80).unwrap());
    }

    #[test]
    fn mel_length_follows_durations() {
        let g = CorpusGenerator::new(small()).unwrap();
        let ph = PhonemeSequence::new(vec![3, 5], 32).unwrap();
        let d = DurationVector::new(vec![2, 1]).unwrap();
        let mel = g.render_mel(&ph, &d, 0, 0, &mut stream_rng(0, 0)).unwrap();
        assert_eq!(mel.dim(), (12, 80));
    }

    #[test]
    fn emotions_differ_only_inside_their_bands() {
        let g = CorpusGenerator::new(CorpusConfig {
            noise_std: 0.0,
            ..small()
        })
        .unwrap();
        let ph = PhonemeSequence::new(vec![1, 4, 9], 32).unwrap();
        let d = DurationVector::new(vec![3, 2, 4]).unwrap();
        for (e1, e2) in [(0, 3), (2, 6), (5, 1)] {
            let a = g.render_mel(&ph, &d, 1, e1, &mut stream_rng(0, 0)).unwrap();
            let b = g.render_mel(&ph, &d, 1, e2, &mut stream_rng(0, 0)).unwrap();
            let (b1, b2) = (g.signatures()[e1].band(), g.signatures()[e2].band());
            let mut changed = 0;
            for ((frame, bin), x) in a.indexed_iter() {
                let y = &b[[frame, bin]];
                let inside = b1.contains(&bin) || b2.contains(&bin);
                if !inside {
                    assert_eq!(x, y, "bin {bin} changed outside the bands");
                } else if x != y {
                    changed += 1;
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn noiseless_renders_ignore_the_noise_stream() {
        let g = CorpusGenerator::new(CorpusConfig {
            noise_std: 0.0,
            ..small()
        })
        .unwrap();
        let s = g.sample(0).unwrap();
        let again = g
            .render_mel(&s.phonemes, &s.gt_durations, s.speaker, s.emotion, &mut stream_rng(9, 9))
            .unwrap();
        assert_eq!(again, s.mel);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            CorpusConfig { vocab_size: 1, ..small() },
            CorpusConfig { n_emotions: 1, ..small() },
            CorpusConfig { max_duration: 7, ..small() },
            CorpusConfig { hop_length: 333, ..small() },
            CorpusConfig { noise_std: -1.0, ..small() },
        ] {
            assert!(matches!(generate_corpus(&bad, 2), Err(Error::Config(_))));
        }
        assert!(generate_corpus(&small(), 0).is_err());
    }

    #[test]
    fn store_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        let corpus = generate_corpus(&config, 5).unwrap();
        let manifest = save_corpus(&corpus, &config, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.samples, corpus);
        assert_eq!(loaded.manifest.seed, 1);
        assert_eq!(loaded.manifest.config, config);
        assert_eq!(loaded.manifest.checksums(), manifest.checksums());
    }

    #[test]
    fn truncated_sample_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        save_corpus(&generate_corpus(&config, 3).unwrap(), &config, dir.path()).unwrap();
        let victim = dir.path().join("samples/000001.safetensors");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Checksum(_))));
    }

    #[test]
    fn manifest_seed_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        save_corpus(&generate_corpus(&config, 2).unwrap(), &config, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["seed"] = serde_json::json!(77);
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn version_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        let config = small();
        save_corpus(&generate_corpus(&config, 1).unwrap(), &config, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["format_version"] = serde_json::json!(99);
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Version { .. })));
    }
}
