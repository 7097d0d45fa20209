//! Lip-prosody alignment: cross-attention, ground-truth masks, the
//! duration-level contrastive loss, monotonic alignment search and the
//! length regulator.
//!
//! Alignment matrices are frame-major: `F x P`, one row per video frame.

use candle_core::{Tensor, D};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{Attended, MultiHeadAttention};
use crate::types::DurationVector;

/// Row-stochastic `F x P` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentWeights(Array2<f64>);

impl AlignmentWeights {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("alignment weights".into()));
        }
        if w.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::Invalid("alignment weight outside [0, 1]".into()));
        }
        for (f, row) in w.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!("row {f} sums to {s}")));
            }
        }
        Ok(Self(w))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn phonemes(&self) -> usize {
        self.0.ncols()
    }
}

/// `F x P` 0/1 matrix assigning each frame to exactly one phoneme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtAlignmentMask(Array2<u8>);

impl GtAlignmentMask {
    /// Checks every mask invariant.
    pub fn new(m: Array2<u8>) -> Result<Self> {
        mask_durations(&m)?;
        Ok(Self(m))
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.0.view()
    }

    pub fn durations(&self) -> DurationVector {
        mask_durations(&self.0).expect("mask invariants checked at construction")
    }
}

/// Recovers block lengths from a mask, rejecting anything that is not a
/// monotone surjective frame assignment.
pub fn mask_durations(m: &Array2<u8>) -> Result<DurationVector> {
    let (f, p) = m.dim();
    if p == 0 || f == 0 {
        return Err(Error::Invalid("empty alignment mask".into()));
    }
    let mut durations = vec![0u32; p];
    let mut current = 0usize;
    for (frame, row) in m.rows().into_iter().enumerate() {
        let ones: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect();
        if ones.len() != 1 || row.iter().any(|&v| v > 1) {
            return Err(Error::Invalid(format!("frame {frame} is not assigned exactly once")));
        }
        let owner = ones[0];
        if owner < current || owner > current + 1 || (frame == 0 && owner != 0) {
            return Err(Error::Invalid(format!(
                "frame {frame} jumps from phoneme {current} to {owner}"
            )));
        }
        current = owner;
        durations[owner] += 1;
    }
    if current != p - 1 {
        return Err(Error::Invalid(format!("phonemes after {current} receive no frames")));
    }
    DurationVector::new(durations)
}

pub fn build_gt_mask(durations: &DurationVector) -> GtAlignmentMask {
    let mut m = Array2::zeros((durations.total(), durations.len()));
    for (frame, owner) in durations.frame_owners().into_iter().enumerate() {
        m[[frame, owner]] = 1;
    }
    GtAlignmentMask(m)
}

/// Lip frames (queries) attending over prosody-aware phoneme encodings.
pub fn cross_attention(
    attn: &MultiHeadAttention,
    lip: &Tensor,
    prosody: &Tensor,
    phoneme_mask: Option<&Tensor>,
) -> Result<Attended> {
    attn.forward(lip, prosody, phoneme_mask)
}

/// Where the temperature is applied in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Numerator and denominator both divided by `tau`.
    #[default]
    Symmetric,
    /// Only the numerator is divided by `tau`.
    NumeratorOnly,
}

/// `-log(sum exp((w*m)/tau) / sum exp(w/tau'))` over all `F x P` entries.
pub fn contrastive_loss(
    w: &AlignmentWeights,
    mask: &GtAlignmentMask,
    tau: f64,
    mode: TemperatureMode,
) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if w.0.dim() != mask.0.dim() {
        return Err(Error::Shape(format!(
            "weights {:?} vs mask {:?}",
            w.0.dim(),
            mask.0.dim()
        )));
    }
    let tau_den = match mode {
        TemperatureMode::Symmetric => tau,
        TemperatureMode::NumeratorOnly => 1.0,
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for (&wv, &mv) in w.0.iter().zip(mask.0.iter()) {
        num += (wv * mv as f64 / tau).exp();
        den += (wv / tau_den).exp();
    }
    Ok(-(num / den).ln())
}

/// Batched, differentiable contrastive loss averaged over the batch.
///
/// `weights`, `gt` and `valid` are `(B, F, P)`; `valid` zeroes padded
/// frames and padded phonemes.
pub fn contrastive_loss_tensor(
    weights: &Tensor,
    gt: &Tensor,
    valid: &Tensor,
    tau: f64,
    mode: TemperatureMode,
) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if weights.dims() != gt.dims() || weights.dims() != valid.dims() {
        return Err(Error::Shape(format!(
            "weights {:?}, mask {:?}, valid {:?}",
            weights.dims(),
            gt.dims(),
            valid.dims()
        )));
    }
    let tau_den = match mode {
        TemperatureMode::Symmetric => tau,
        TemperatureMode::NumeratorOnly => 1.0,
    };
    let on = (gt * valid)?;
    let off = (valid - &on)?;
    let e_num = (weights / tau)?.exp()?;
    let num = ((e_num * &on)? + off)?.flatten_from(1)?.sum(D::Minus1)?;
    let e_den = (weights / tau_den)?.exp()?;
    let den = (e_den * valid)?.flatten_from(1)?.sum(D::Minus1)?;
    Ok((den.log()? - num.log()?)?.mean_all()?)
}

fn log_weight(w: f64) -> f64 {
    w.max(1e-300).ln()
}

/// Sum of log-weights along the path described by `durations`.
pub fn path_score(w: ArrayView2<'_, f64>, durations: &DurationVector) -> f64 {
    durations
        .frame_owners()
        .into_iter()
        .enumerate()
        .map(|(f, p)| log_weight(w[[f, p]]))
        .sum()
}

/// Monotonic alignment search over `F x P` weights.
///
/// Ties favour staying on the current phoneme while tracing back.
pub fn mas(w: ArrayView2<'_, f64>) -> Result<DurationVector> {
    let (f_len, p_len) = w.dim();
    if p_len == 0 || f_len < p_len {
        return Err(Error::InfeasibleAlignment {
            frames: f_len,
            phonemes: p_len,
        });
    }
    let mut q = Array2::from_elem((f_len, p_len), f64::NEG_INFINITY);
    q[[0, 0]] = log_weight(w[[0, 0]]);
    for f in 1..f_len {
        let lo = (p_len + f).saturating_sub(f_len);
        for p in lo..p_len.min(f + 1) {
            let stay = q[[f - 1, p]];
            let advance = if p > 0 { q[[f - 1, p - 1]] } else { f64::NEG_INFINITY };
            q[[f, p]] = stay.max(advance) + log_weight(w[[f, p]]);
        }
    }
    let mut durations = vec![0u32; p_len];
    let mut p = p_len - 1;
    for f in (0..f_len).rev() {
        durations[p] += 1;
        if f == 0 {
            break;
        }
        if p > 0 && (p == f || q[[f - 1, p - 1]] > q[[f - 1, p]]) {
            p -= 1;
        }
    }
    DurationVector::new(durations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub durations: DurationVector,
    pub score: f64,
    pub paths_enumerated: usize,
}

pub const ORACLE_PATH_LIMIT: u128 = 100_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive search over every monotone surjective path; test support for
/// [`mas`].
pub fn mas_oracle(w: ArrayView2<'_, f64>) -> Result<OracleResult> {
    let (f_len, p_len) = w.dim();
    if p_len == 0 || f_len < p_len {
        return Err(Error::InfeasibleAlignment {
            frames: f_len,
            phonemes: p_len,
        });
    }
    let count = binomial(f_len - 1, p_len - 1);
    if count > ORACLE_PATH_LIMIT {
        return Err(Error::Invalid(format!(
            "{count} paths exceed the enumeration limit of {ORACLE_PATH_LIMIT}"
        )));
    }
    // boundaries[i] is the first frame of phoneme i + 1
    let mut boundaries: Vec<usize> = (1..p_len).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut enumerated = 0usize;
    loop {
        enumerated += 1;
        let mut owners = Vec::with_capacity(f_len);
        let mut p = 0;
        for f in 0..f_len {
            while p < boundaries.len() && boundaries[p] == f {
                p += 1;
            }
            owners.push(p);
        }
        let score: f64 = owners
            .iter()
            .enumerate()
            .map(|(f, &p)| log_weight(w[[f, p]]))
            .sum();
        let better = match &best {
            None => true,
            Some((s, o)) => {
                score > *s || (score == *s && owners.iter().rev().gt(o.iter().rev()))
            }
        };
        if better {
            best = Some((score, owners));
        }
        // next combination of P-1 boundaries from 1..F
        let k = boundaries.len();
        let mut i = k;
        let mut advanced = false;
        while i > 0 {
            i -= 1;
            if boundaries[i] < f_len - (k - i) {
                boundaries[i] += 1;
                for j in i + 1..k {
                    boundaries[j] = boundaries[j - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    let (score, owners) = best.expect("at least one path");
    let mut durations = vec![0u32; p_len];
    for p in owners {
        durations[p] += 1;
    }
    Ok(OracleResult {
        durations: DurationVector::new(durations)?,
        score,
        paths_enumerated: enumerated,
    })
}

/// Repeats row `i` of `seq` `d_i` times.
pub fn length_regulate<T: Clone>(
    durations: &DurationVector,
    seq: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if seq.nrows() != durations.len() {
        return Err(Error::Shape(format!(
            "{} durations for {} rows",
            durations.len(),
            seq.nrows()
        )));
    }
    let owners = durations.frame_owners();
    Ok(seq.select(ndarray::Axis(0), &owners))
}

/// Batched length regulation of `x: (B, P, C)`; output is `(B, max F, C)`
/// with zero rows past each sample's length.
pub fn length_regulate_tensor(x: &Tensor, durations: &[DurationVector]) -> Result<Tensor> {
    let (b, p_max, c) = x.dims3()?;
    if durations.len() != b {
        return Err(Error::Shape(format!("{} duration vectors for batch {b}", durations.len())));
    }
    let f_max = durations.iter().map(|d| d.total()).max().unwrap_or(0);
    let pad_row = (b * p_max) as u32;
    let mut index = Vec::with_capacity(b * f_max);
    for (i, d) in durations.iter().enumerate() {
        if d.len() > p_max {
            return Err(Error::Shape(format!("{} durations for {p_max} rows", d.len())));
        }
        let owners = d.frame_owners();
        index.extend(owners.iter().map(|&o| (i * p_max + o) as u32));
        index.extend(std::iter::repeat_n(pad_row, f_max - owners.len()));
    }
    let flat = x.reshape((b * p_max, c))?;
    let padded = Tensor::cat(&[&flat, &flat.narrow(0, 0, 1)?.zeros_like()?], 0)?;
    let index = Tensor::from_vec(index, b * f_max, x.device())?;
    Ok(padded.index_select(&index, 0)?.reshape((b, f_max, c))?)
}
