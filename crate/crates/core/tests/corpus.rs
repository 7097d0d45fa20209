//! Statistical properties of the seed-0, 500-sample synthetic corpus.

use dubflow::corpus::{band_energies, generate_corpus, CorpusConfig, CorpusGenerator};
use dubflow::types::CorpusSample;

/// Smallest gap between the mean own-band energy of an emotion and its mean
/// band energy under other emotions, measured on the seed-0 corpus (1.318).
const BAND_ENERGY_MARGIN: f64 = 1.25;

fn seed0() -> (CorpusGenerator, Vec<CorpusSample>) {
    let config = CorpusConfig::default();
    (CorpusGenerator::new(config.clone()).unwrap(), generate_corpus(&config, 500).unwrap())
}

fn standardized(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = features[0].len();
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| features.iter().map(|f| f[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| (features.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    features
        .iter()
        .map(|f| (0..d).map(|k| (f[k] - mean[k]) / std[k]).collect())
        .collect()
}

/// Multinomial logistic regression by full-batch gradient descent.
fn fit_probe(x: &[Vec<f64>], y: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = x[0].len() + 1;
    let mut w = vec![vec![0.0; d]; classes];
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; d]; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let p = softmax(&logits(&w, xi));
            for c in 0..classes {
                let err = p[c] - f64::from(u8::from(c == yi));
                for k in 0..d - 1 {
                    grad[c][k] += err * xi[k];
                }
                grad[c][d - 1] += err;
            }
        }
        for c in 0..classes {
            for k in 0..d {
                w[c][k] -= 0.5 * grad[c][k] / x.len() as f64;
            }
        }
    }
    w
}

fn logits(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()])
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn linear_probe_on_band_energies_separates_emotions() {
    let (gen, samples) = seed0();
    let features = standardized(&samples.iter().map(|s| band_energies(&s.mel, gen.signatures())).collect::<Vec<_>>());
    let labels: Vec<usize> = samples.iter().map(|s| s.emotion).collect();
    let w = fit_probe(&features[..400], &labels[..400], gen.config().n_emotions);
    let correct = features[400..]
        .iter()
        .zip(&labels[400..])
        .filter(|(x, &y)| {
            let z = logits(&w, x);
            (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])) == Some(y)
        })
        .count();
    let accuracy = correct as f64 / 100.0;
    assert!(accuracy >= 0.95, "held-out probe accuracy {accuracy}");
}

#[test]
fn own_band_energy_exceeds_other_emotions_by_the_frozen_margin() {
    let (gen, samples) = seed0();
    let n = gen.config().n_emotions;
    let (mut own, mut other) = (vec![(0.0, 0usize); n], vec![(0.0, 0usize); n]);
    for s in &samples {
        for (e, energy) in band_energies(&s.mel, gen.signatures()).into_iter().enumerate() {
            let slot = if e == s.emotion { &mut own[e] } else { &mut other[e] };
            slot.0 += energy;
            slot.1 += 1;
        }
    }
    for e in 0..n {
        assert!(own[e].1 > 0, "emotion {e} never drawn");
        let margin = own[e].0 / own[e].1 as f64 - other[e].0 / other[e].1 as f64;
        assert!(margin >= BAND_ENERGY_MARGIN, "emotion {e}: margin {margin:.3}");
    }
}

#[test]
fn generation_is_a_pure_function_of_config_and_count() {
    let config = CorpusConfig { seed: 3, ..CorpusConfig::default() };
    let a = generate_corpus(&config, 20).unwrap();
    let b = generate_corpus(&config, 30).unwrap();
    assert_eq!(a[..], b[..20]);
}
