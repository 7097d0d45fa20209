//! Connectionist temporal classification: loss, greedy decoding and phoneme
//! error rate.
//!
//! The forward-backward recursion runs on the host in `f64`; its gradient is
//! injected into the graph through a linear surrogate so that autograd
//! carries it back through the log-softmax.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood and its gradient with respect to the per-frame
/// log-probabilities, for one sequence.
///
/// `logp` is `T` rows of `V + 1` log-probabilities, `blank` is the blank
/// index. Returns `None` when no path can emit `target` in `T` frames.
pub fn ctc_nll(logp: &[Vec<f64>], target: &[u32], blank: usize) -> Option<(f64, Vec<Vec<f64>>)> {
    let t_len = logp.len();
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] as usize };
    let skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    if t_len == 0 {
        return None;
    }
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = logp[0][blank];
    if s_len > 1 {
        alpha[0][1] = logp[0][label(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = lse2(a, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                a = lse2(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == ninf { ninf } else { a + logp[t][label(s)] };
        }
    }
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = logp[t_len - 1][label(s_len - 1)];
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = logp[t_len - 1][label(s_len - 2)];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = lse2(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = lse2(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = if b == ninf { ninf } else { b + logp[t][label(s)] };
        }
    }
    let mut log_total = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_total = lse2(log_total, alpha[t_len - 1][s_len - 2]);
    }
    if !log_total.is_finite() {
        return None;
    }
    let width = logp[0].len();
    let mut grad = vec![vec![0.0; width]; t_len];
    for t in 0..t_len {
        for s in 0..s_len {
            let k = label(s);
            let occ = alpha[t][s] + beta[t][s] - logp[t][k] - log_total;
            if occ > ninf {
                grad[t][k] -= occ.exp();
            }
        }
    }
    Some((-log_total, grad))
}

/// Batched CTC loss on `log_probs: (B, T, V + 1)`.
///
/// Each sequence's negative log-likelihood is divided by its target length
/// and the batch mean is returned. Sequences with no feasible path
/// contribute zero.
pub fn ctc_loss(
    log_probs: &Tensor,
    input_lengths: &[usize],
    targets: &[Vec<u32>],
    blank: usize,
) -> Result<Tensor> {
    let (b, t_max, width) = log_probs.dims3()?;
    if input_lengths.len() != b || targets.len() != b {
        return Err(Error::Shape(format!(
            "batch {b} with {} lengths and {} targets",
            input_lengths.len(),
            targets.len()
        )));
    }
    if blank >= width {
        return Err(Error::Invalid(format!("blank {blank} outside {width} classes")));
    }
    let host = log_probs.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let mut grad = vec![0.0f64; b * t_max * width];
    let mut total = 0.0;
    for i in 0..b {
        let len = input_lengths[i].min(t_max);
        let target = &targets[i];
        if target.is_empty() {
            return Err(Error::Invalid("empty CTC target".into()));
        }
        let Some((nll, g)) = ctc_nll(&host[i][..len], target, blank) else {
            continue;
        };
        let scale = 1.0 / (target.len() as f64 * b as f64);
        total += nll * scale;
        for (t, row) in g.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                grad[(i * t_max + t) * width + k] = v * scale;
            }
        }
    }
    let g = Tensor::from_vec(grad, (b, t_max, width), log_probs.device())?.to_dtype(log_probs.dtype())?;
    let surrogate = (log_probs * g)?.sum_all()?;
    let value = Tensor::new(total, log_probs.device())?.to_dtype(log_probs.dtype())?;
    Ok(((&surrogate - surrogate.detach())? + value)?)
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &[Vec<f32>], blank: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs {
        let k = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if Some(k) != prev && k != blank {
            out.push(k as u32);
        }
        prev = Some(k);
    }
    out
}

/// Edit distance between hypothesis and reference over reference length.
pub fn phoneme_error_rate(hypothesis: &[u32], reference: &[u32]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 0.0 } else { 1.0 };
    }
    strsim::generic_levenshtein(&hypothesis.to_vec(), &reference.to_vec()) as f64 / reference.len() as f64
}
