//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use dubflow::align::{
    build_gt_mask, contrastive_loss, contrastive_loss_tensor, length_regulate, mas, mas_oracle, mask_durations,
    path_score, AlignmentWeights, GtAlignmentMask, TemperatureMode,
};
use dubflow::corpus::{band_energies, generate_corpus, load_corpus, save_corpus, CorpusConfig, CorpusGenerator};
use dubflow::flow::{cfm_loss, ode_sample, sample_path, FlowConfig, GaussianField, VectorField};
use dubflow::guidance::{
    grad_log_prob, holdout_split, pngm_velocity, train_classifier, ClassifierConfig, ClassifierTrainConfig,
    EmotionClassifier, GuidanceParams, NegativeMode, Target,
};
use dubflow::nn::{length_mask, ParamStore};
use dubflow::trainer::{
    alignment_diagnostics, data_dims, evaluate, intensity_grid, intensity_shape, load_checkpoint, save_checkpoint,
    synthesize, train, EvalConfig, GuidanceSpec, ModelConfig, Pipeline, TrainConfig, Trainer,
};
use dubflow::types::{CorpusSample, DurationVector, EmotionInstruction};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pipeline training steps for the 500-sample quality and intensity runs.
const PIPELINE_STEPS: usize = 2000;
/// Held-out samples rendered per intensity cell.
const SWEEP_SAMPLES: usize = 20;
/// Held-out samples averaged per point of the guided band-energy curves.
const BAND_SAMPLES: usize = 50;
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_weights(rng: &mut ChaCha8Rng, f: usize, p: usize, quantized: bool) -> Array2<f64> {
    let mut w = Array2::from_shape_fn((f, p), |_| {
        if quantized {
            rng.random_range(1..4) as f64
        } else {
            rng.random::<f64>().powi(3) + 1e-6
        }
    });
    for mut row in w.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    w
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut mismatched = 0;
    for i in 0..200 {
        let p = rng.random_range(1..=5);
        let f = rng.random_range(p..=9);
        let w = random_weights(&mut rng, f, p, i % 4 == 0);
        let found = mas(w.view()).map_err(|e| e.to_string())?;
        let oracle = mas_oracle(w.view()).map_err(|e| e.to_string())?;
        worst = worst.max((path_score(w.view(), &found) - oracle.score).abs());
        mismatched += usize::from(found != oracle.durations);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && mismatched == 0 && secs < 60.0,
        format!("200 matrices, max score gap {worst:.1e}, duration mismatches {mismatched}, {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let p = rng.random_range(1..=12);
        let d = DurationVector::new((0..p).map(|_| rng.random_range(1..=6)).collect()).map_err(|e| e.to_string())?;
        let mask = build_gt_mask(&d);
        let raw = mask.view().to_owned();
        if GtAlignmentMask::new(raw.clone()).is_err() {
            return Err(format!("case {case}: mask for {d:?} violates its invariants"));
        }
        if raw.rows().into_iter().any(|r| r.iter().map(|&v| v as u32).sum::<u32>() != 1) {
            return Err(format!("case {case}: a frame is not assigned exactly once"));
        }
        let col_sums: Vec<u32> = raw.columns().into_iter().map(|c| c.iter().map(|&v| v as u32).sum()).collect();
        if col_sums != d.as_slice() {
            return Err(format!("case {case}: column sums {col_sums:?} vs durations {:?}", d.as_slice()));
        }
        let seq = Array2::from_shape_fn((p, 3), |(i, j)| (i * 10 + j) as f64);
        let expanded = length_regulate(&d, seq.view()).map_err(|e| e.to_string())?;
        if expanded.nrows() != d.total() {
            return Err(format!("case {case}: {} rows for total {}", expanded.nrows(), d.total()));
        }
        for (frame, owner) in d.frame_owners().into_iter().enumerate() {
            if expanded.row(frame) != seq.row(owner) {
                return Err(format!("case {case}: frame {frame} is not a copy of row {owner}"));
            }
        }
        let back = mask_durations(&raw).map_err(|e| e.to_string())?;
        if back != d || build_gt_mask(&back) != mask {
            return Err(format!("case {case}: mask round-trip changed {d:?}"));
        }
    }
    Ok("1000 duration vectors: mask invariants, regulator length and round-trip hold".into())
}

/// Exact conditional target recovered from the path point:
/// `u = (mu - (1 - s) x) / (1 - (1 - s) t)` with `mu` the data endpoint.
struct PathOracle {
    sigma_min: f64,
    offset: f64,
}

impl VectorField for PathOracle {
    fn velocity(&self, x: &Tensor, t: &Tensor, mu: &Tensor, _s: &Tensor, _m: &Tensor) -> dubflow::Result<Tensor> {
        let k = 1.0 - self.sigma_min;
        let denom = ((t * -k)? + 1.0)?.reshape((x.dim(0)?, 1, 1))?;
        Ok(((mu - (x * k)?)?.broadcast_div(&denom)? + self.offset)?)
    }
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

fn criterion_3() -> Outcome {
    let dev = Device::Cpu;
    let s = 1e-4;
    let x0 = Tensor::randn(0f64, 1.0, (4, 7, 5), &dev).map_err(|e| e.to_string())?;
    let m = Tensor::randn(0f64, 1.0, (4, 7, 5), &dev).map_err(|e| e.to_string())?;
    let at = |t: f64| sample_path(&x0, &m, &Tensor::full(t, 4, &dev).unwrap(), s).unwrap();
    let (phi0, u0) = at(0.0);
    let (phi1, u1) = at(1.0);
    let (_, u_mid) = at(0.37);
    let end = ((&x0 * s).unwrap() + &m).unwrap();
    let start_gap = max_abs(&phi0, &x0);
    let end_gap = max_abs(&phi1, &end);
    let u_gap = max_abs(&u0, &u1).max(max_abs(&u0, &u_mid));
    let mask = length_mask(&[7, 5, 3, 6], 7, DType::F64, &dev).map_err(|e| e.to_string())?;
    let mel = (Tensor::randn(0f64, 1.0, (4, 7, 5), &dev).unwrap().broadcast_mul(&mask.unsqueeze(2).unwrap())).unwrap();
    let style = Tensor::zeros((4, 1), DType::F64, &dev).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let loss = |offset: f64, rng: &mut ChaCha8Rng| {
        let field = PathOracle { sigma_min: s, offset };
        cfm_loss(&field, &mel, &mel, &style, &mask, s, rng).unwrap().loss.to_scalar::<f64>().unwrap()
    };
    let zero = loss(0.0, &mut rng);
    let offsets = [0.5, -1.25, 2.0];
    let worst_offset = offsets
        .iter()
        .map(|&c| (loss(c, &mut rng) - c * c).abs())
        .fold(0.0f64, f64::max);
    check(
        start_gap == 0.0 && end_gap < 1e-14 && u_gap == 0.0 && zero.abs() < 1e-6 && worst_offset < 1e-6,
        format!(
            "phi(0) gap {start_gap:.1e}, phi(1) gap {end_gap:.1e}, u(t) spread {u_gap:.1e}, oracle loss {zero:.1e}, offset error {worst_offset:.1e}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let n = 10_000;
    let mut details = Vec::new();
    let mut ok = true;
    for (mean, std) in [(1.5, 0.6), (-2.0, 1.3)] {
        let g = GaussianField { mean, std, sigma_min: 1e-4 };
        let mu = Tensor::zeros((1, n, 1), DType::F64, &dev).unwrap();
        let style = Tensor::zeros((1, 1), DType::F64, &dev).unwrap();
        let mask = Tensor::ones((1, n), DType::F64, &dev).unwrap();
        let cfg = FlowConfig { ode_steps: 100, ..FlowConfig::default() };
        let out = ode_sample(&g, &mu, &style, &mask, &cfg, None, &[11], &[n]).map_err(|e| e.to_string())?;
        let xs = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        ok &= (m - mean).abs() <= 0.05 && (v - std * std).abs() <= 0.1;
        details.push(format!("N({mean}, {:.2}) -> mean {m:.3} var {v:.3}", std * std));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 60.0, format!("{}, {secs:.2}s", details.join("; ")))
}

fn classifier_f64(seed: u64) -> EmotionClassifier {
    let mut ps = ParamStore::new(DType::F64, seed);
    let config = ClassifierConfig { channels: 12, layers: 3, ..ClassifierConfig::default() };
    EmotionClassifier::new(&mut ps, 6, 4, config).unwrap().frozen().unwrap()
}

fn classifier_objective(psi: &EmotionClassifier, x: &[f64], dims: (usize, usize, usize), t: f64, mask: &Tensor, class: &[usize]) -> f64 {
    let dev = Device::Cpu;
    let xx = Tensor::from_slice(x, dims, &dev).unwrap();
    let tt = Tensor::full(t, dims.0, &dev).unwrap();
    let p = psi.probs(&xx, &tt, mask).unwrap().to_vec2::<f64>().unwrap();
    p.iter().zip(class).map(|(row, &c)| row[c].ln()).sum()
}

fn criterion_5() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let psi = classifier_f64(5);
    let dims = (2, 6, 6);
    let mask = length_mask(&[6, 4], 6, DType::F64, &dev).unwrap();
    let class = [1usize, 3];
    let mut worst_cls = 0.0f64;
    let mut checked_cls = 0;
    for round in 0..5 {
        let x = Tensor::randn(0f64, 1.0, dims, &dev).unwrap();
        let t = 0.1 + 0.2 * round as f64;
        let targets: Vec<Target> = class.iter().map(|&c| Target::Class(c)).collect();
        let g = grad_log_prob(&psi, &x, t, &mask, &targets, NegativeMode::WeightedLogProb).map_err(|e| e.to_string())?;
        let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut done = 0;
        while done < 12 {
            let i = rng.random_range(0..base.len());
            if g[i].abs() < 1e-6 {
                continue;
            }
            let h = 1e-5;
            let (mut up, mut down) = (base.clone(), base.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (classifier_objective(&psi, &up, dims, t, &mask, &class)
                - classifier_objective(&psi, &down, dims, t, &mask, &class))
                / (2.0 * h);
            worst_cls = worst_cls.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()));
            done += 1;
        }
        checked_cls += done;
    }

    let mut worst_con = 0.0f64;
    let mut checked_con = 0;
    for round in 0..10 {
        let p = rng.random_range(2..=5);
        let f = rng.random_range(p..=9);
        let w = random_weights(&mut rng, f, p, false);
        let d = mas(w.view()).unwrap();
        let mask = build_gt_mask(&d);
        let mode = if round % 2 == 0 { TemperatureMode::Symmetric } else { TemperatureMode::NumeratorOnly };
        let tau = 0.1 + 0.05 * round as f64;
        let var = Var::from_tensor(&Tensor::from_slice(w.as_slice().unwrap(), (1, f, p), &dev).unwrap()).unwrap();
        let gt: Vec<f64> = mask.view().iter().map(|&v| v as f64).collect();
        let gt = Tensor::from_vec(gt, (1, f, p), &dev).unwrap();
        let valid = Tensor::ones((1, f, p), DType::F64, &dev).unwrap();
        let loss = contrastive_loss_tensor(var.as_tensor(), &gt, &valid, tau, mode).map_err(|e| e.to_string())?;
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let host = |w: &Array2<f64>| contrastive_loss(&AlignmentWeights::new(w.clone()).unwrap(), &mask, tau, mode).unwrap();
        for _ in 0..5 {
            let (fi, pi) = (rng.random_range(0..f), rng.random_range(0..p));
            let h = 1e-7;
            let (mut up, mut down) = (w.clone(), w.clone());
            up[[fi, pi]] += h;
            down[[fi, pi]] -= h;
            let fd = (host(&up) - host(&down)) / (2.0 * h);
            let an = g[fi * p + pi];
            worst_con = worst_con.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-12));
            checked_con += 1;
        }
    }
    check(
        worst_cls <= 1e-3 && worst_con <= 1e-4 && checked_cls >= 50 && checked_con >= 50,
        format!(
            "classifier: {checked_cls} points, max rel err {worst_cls:.1e}; contrastive: {checked_con} points, max rel err {worst_con:.1e}"
        ),
    )
}

fn small_corpus(seed: u64, count: usize) -> (CorpusConfig, Vec<CorpusSample>) {
    let config = CorpusConfig { seed, ..CorpusConfig::default() };
    let samples = generate_corpus(&config, count).unwrap();
    (config, samples)
}

fn criterion_6() -> Outcome {
    let (config, samples) = small_corpus(6, 4);
    let dims = data_dims(&config).unwrap();
    let pipeline = Pipeline::new(dims, ModelConfig::desk(), 6).unwrap();
    let mut ps = ParamStore::new(DType::F32, 6);
    let psi = EmotionClassifier::new(&mut ps, config.n_mels, config.n_emotions, ClassifierConfig::default()).unwrap();
    let refs: Vec<&CorpusSample> = samples.iter().collect();
    let flow = FlowConfig::default();
    let plain = synthesize(&pipeline, &refs, None, &flow, 9).map_err(|e| e.to_string())?;
    let spec = |gamma, alpha, beta| GuidanceSpec {
        classifier: &psi,
        params: GuidanceParams {
            gamma,
            instruction: EmotionInstruction { class: 2, alpha, beta },
        },
        mode: NegativeMode::WeightedLogProb,
    };
    let gamma0 = synthesize(&pipeline, &refs, Some(&spec(0.0, 5.0, 1.7)), &flow, 9).map_err(|e| e.to_string())?;
    let inert = synthesize(&pipeline, &refs, Some(&spec(15.0, 0.0, 0.0)), &flow, 9).map_err(|e| e.to_string())?;
    let active = synthesize(&pipeline, &refs, Some(&spec(15.0, 5.0, 1.7)), &flow, 9).map_err(|e| e.to_string())?;
    let bits = |r: &[dubflow::trainer::Render]| -> Vec<u32> { r.iter().flat_map(|x| x.mel.iter().map(|v| v.to_bits())).collect() };
    let identical = bits(&plain) == bits(&gamma0) && bits(&plain) == bits(&inert);
    let differs = bits(&plain) != bits(&active);

    let dev = Device::Cpu;
    let psi64 = classifier_f64(6);
    let x = Tensor::randn(0f64, 1.0, (2, 5, 6), &dev).unwrap();
    let v = Tensor::randn(0f64, 1.0, (2, 5, 6), &dev).unwrap();
    let mask = Tensor::ones((2, 5), DType::F64, &dev).unwrap();
    let mut worst = 0.0f64;
    for mode in [NegativeMode::WeightedLogProb, NegativeMode::LogMixtureProb] {
        for beta in [0.0, 1.7] {
            let at = |alpha: f64| {
                let p = GuidanceParams {
                    gamma: 15.0,
                    instruction: EmotionInstruction { class: 1, alpha, beta },
                };
                pngm_velocity(&v, &x, 0.6, &mask, &psi64, &p, mode).unwrap()
            };
            let (v0, v1) = (at(0.0), at(1.0));
            let slope = (&v1 - &v0).unwrap();
            for alpha in [2.5, 5.0, 0.3] {
                let expected = (&v0 + (&slope * alpha).unwrap()).unwrap();
                worst = worst.max(max_abs(&at(alpha), &expected));
            }
        }
    }
    check(
        identical && differs && worst < 1e-9,
        format!(
            "gamma=0 and alpha=beta=0 renders bit-identical: {identical}; active guidance changes output: {differs}; max deviation from linearity in alpha {worst:.1e}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let (config, samples) = small_corpus(0, 50);
    let refs: Vec<&CorpusSample> = samples.iter().collect();
    let pipeline = Pipeline::new(data_dims(&config).unwrap(), ModelConfig::desk(), 0).unwrap();
    let train_config = TrainConfig { steps: 5000, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(pipeline, train_config).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut history = Vec::new();
    while trainer.step < 5000 && start.elapsed() < OVERFIT_BUDGET {
        trainer
            .run(&samples, Some(trainer.step + 250), &mut |_| Ok(()))
            .map_err(|e| e.to_string())?;
        let d = alignment_diagnostics(&trainer.pipeline, &refs).map_err(|e| e.to_string())?;
        history.push(format!("{}:{:.2}/{:.2}", trainer.step, d.mas_exact_match, d.ctc_exact_match));
        if d.mas_exact_match == 1.0 && d.ctc_exact_match == 1.0 {
            let secs = start.elapsed().as_secs_f64();
            return check(
                start.elapsed() <= OVERFIT_BUDGET,
                format!("100% MAS and CTC exact match at step {} after {secs:.0}s (step:mas/ctc {})", trainer.step, history.join(" ")),
            );
        }
    }
    Err(format!(
        "not reached by step {} after {:.0}s (step:mas/ctc {})",
        trainer.step,
        start.elapsed().as_secs_f64(),
        history.join(" ")
    ))
}

struct Trained {
    pipeline: Pipeline,
    step: usize,
    train: Vec<CorpusSample>,
    held: Vec<CorpusSample>,
    n_mels: usize,
    n_emotions: usize,
    corpus: CorpusConfig,
}

fn trained_pipeline() -> Trained {
    let (config, samples) = small_corpus(0, 500);
    let (train_idx, held_idx) = holdout_split(samples.len(), 0.2);
    let train_set: Vec<CorpusSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let held: Vec<CorpusSample> = held_idx.iter().map(|&i| samples[i].clone()).collect();
    let start = Instant::now();
    let (trainer, _) = train(
        &train_set,
        data_dims(&config).unwrap(),
        ModelConfig::desk(),
        TrainConfig { steps: PIPELINE_STEPS, ..TrainConfig::desk() },
    )
    .unwrap();
    println!("  trained the 500-sample pipeline for {PIPELINE_STEPS} steps in {:.0}s", start.elapsed().as_secs_f64());
    Trained {
        step: trainer.step,
        pipeline: trainer.pipeline,
        train: train_set,
        held,
        n_mels: config.n_mels,
        n_emotions: config.n_emotions,
        corpus: config,
    }
}

fn criterion_8(t: &Trained) -> Outcome {
    let held: Vec<&CorpusSample> = t.held.iter().collect();
    let report = evaluate(&t.pipeline, t.step, None, &held, &EvalConfig::default()).map_err(|e| e.to_string())?;
    check(
        report.mcd_relative_improvement >= 0.5,
        format!(
            "{} held-out samples: MCD-DTW {:.3} vs shuffled baseline {:.3}, {:.1}% better (MAS exact {:.2}, PER {:.3})",
            report.samples,
            report.mcd_dtw,
            report.baseline_mcd_dtw,
            100.0 * report.mcd_relative_improvement,
            report.mas_exact_match,
            report.phoneme_error_rate
        ),
    )
}

fn guidance_classifier(t: &Trained) -> EmotionClassifier {
    let train_refs: Vec<&CorpusSample> = t.train.iter().collect();
    let held_refs: Vec<&CorpusSample> = t.held.iter().collect();
    let start = Instant::now();
    let trained = train_classifier(
        &train_refs,
        &held_refs,
        t.n_mels,
        t.n_emotions,
        &ClassifierConfig::default(),
        &ClassifierTrainConfig::default(),
        0,
        &mut |_, _| {},
    )
    .unwrap();
    println!(
        "  classifier: held-out accuracy {:.3} clean, {:?} by t, {:.0}s",
        trained.report.holdout_accuracy_clean,
        trained.report.holdout_accuracy_by_t,
        start.elapsed().as_secs_f64()
    );
    trained.classifier
}

fn criterion_9(t: &Trained, classifier: &EmotionClassifier) -> Outcome {
    let subset: Vec<&CorpusSample> = t
        .held.iter().take(SWEEP_SAMPLES).collect();
    let config = EvalConfig::default();
    let start = Instant::now();
    let cells = intensity_grid(&t.pipeline, classifier, &subset, &config, &mut |_| {}).map_err(|e| e.to_string())?;
    let shape = intensity_shape(&cells, t.n_emotions);
    let violation_rate = shape.alpha_violations as f64 / shape.alpha_pairs.max(1) as f64;
    let min_gain = shape.gain_at_max_alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let dominated = shape.beta_dominates.iter().filter(|&&d| d).count();
    let ok = violation_rate <= 0.05
        && shape.gain_at_max_alpha.len() == t.n_emotions
        && min_gain >= 0.2
        && dominated == shape.beta_dominates.len();
    let gains: Vec<String> = shape.gain_at_max_alpha.iter().map(|g| format!("{g:.2}")).collect();
    check(
        ok,
        format!(
            "{} cells over {} held-out samples in {:.0}s: alpha violations {}/{}, IS gain at alpha=5 per emotion [{}], beta>0 dominates {dominated}/{}",
            cells.len(),
            subset.len(),
            start.elapsed().as_secs_f64(),
            shape.alpha_violations,
            shape.alpha_pairs,
            gains.join(", "),
            shape.beta_dominates.len()
        ),
    )
}

/// Mean energy of each sample's render inside the `emotion` signature band.
fn target_band_energy(
    t: &Trained,
    classifier: &EmotionClassifier,
    samples: &[&CorpusSample],
    emotion: usize,
    alpha: f64,
    beta: f64,
) -> Result<f64, String> {
    let config = EvalConfig::default();
    let spec = GuidanceSpec {
        classifier,
        params: GuidanceParams {
            gamma: config.gamma,
            instruction: EmotionInstruction::new(emotion, alpha, beta, t.n_emotions).map_err(|e| e.to_string())?,
        },
        mode: config.negative_mode,
    };
    let renders = synthesize(&t.pipeline, samples, Some(&spec), &config.flow, config.seed).map_err(|e| e.to_string())?;
    let signatures = CorpusGenerator::new(t.corpus.clone()).map_err(|e| e.to_string())?.signatures().to_vec();
    Ok(renders.iter().map(|r| band_energies(&r.mel, &signatures)[emotion]).sum::<f64>() / renders.len() as f64)
}

fn guidance_band_energy(t: &Trained, classifier: &EmotionClassifier) -> Outcome {
    let samples: Vec<&CorpusSample> = t.held.iter().take(BAND_SAMPLES).collect();
    let alphas = EvalConfig::default().alpha_grid;
    let start = Instant::now();
    let mut curves = Vec::new();
    let mut ok = samples.len() >= 50;
    for emotion in 0..t.n_emotions {
        let curve = alphas
            .iter()
            .map(|&a| target_band_energy(t, classifier, &samples, emotion, a, 0.0))
            .collect::<Result<Vec<f64>, String>>()?;
        ok &= curve.windows(2).all(|w| w[1] > w[0]);
        let chosen = target_band_energy(t, classifier, &samples, emotion, 3.5, 0.3)?;
        ok &= chosen > curve[0];
        let points: Vec<String> = curve.iter().map(|e| format!("{e:.3}")).collect();
        curves.push(format!("e{emotion} [{}] (3.5, 0.3) {chosen:.3}", points.join(" ")));
    }
    check(
        ok,
        format!(
            "target-band energy over alpha {alphas:?} at beta=0 on {} held-out samples in {:.0}s: {}",
            samples.len(),
            start.elapsed().as_secs_f64(),
            curves.join("; ")
        ),
    )
}

fn criterion_10() -> Outcome {
    let (config, samples) = small_corpus(10, 16);
    let dims = data_dims(&config).unwrap();
    let schedule = TrainConfig { steps: 12, batch_size: 4, log_every: 1, ..TrainConfig::desk() };
    let run = || train(&samples, dims, ModelConfig::desk(), schedule.clone()).unwrap();
    let (trainer, log_a) = run();
    let (_, log_b) = run();
    let lines = |log: &[dubflow::trainer::StepMetrics]| -> Vec<String> { log.iter().map(|m| serde_json::to_string(m).unwrap()).collect() };
    let same_logs = lines(&log_a) == lines(&log_b) && log_a.len() == 12;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(&dir.path().join("ckpt"), &trainer, None).map_err(|e| e.to_string())?;
    let (restored, _) = load_checkpoint(&dir.path().join("ckpt")).map_err(|e| e.to_string())?;
    let refs: Vec<&CorpusSample> = samples.iter().take(3).collect();
    let flow = FlowConfig::default();
    let before = synthesize(&trainer.pipeline, &refs, None, &flow, 4).map_err(|e| e.to_string())?;
    let after = synthesize(&restored.pipeline, &refs, None, &flow, 4).map_err(|e| e.to_string())?;
    let bits = |r: &[dubflow::trainer::Render]| -> Vec<u32> { r.iter().flat_map(|x| x.mel.iter().map(|v| v.to_bits())).collect() };
    let same_render = bits(&before) == bits(&after) && before == after;

    save_corpus(&samples, &config, &dir.path().join("corpus")).map_err(|e| e.to_string())?;
    let loaded = load_corpus(&dir.path().join("corpus")).map_err(|e| e.to_string())?;
    let same_corpus = loaded.samples == samples && loaded.manifest.config == config;
    check(
        same_logs && same_render && same_corpus,
        format!("identical metrics logs: {same_logs}; checkpoint round-trip renders bit-exact: {same_render}; corpus round-trip lossless: {same_corpus}"),
    )
}

fn run(results: &mut Vec<bool>, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
        Err(detail) => println!("FAIL {name} ({secs:.1}s): {detail}"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results = Vec::new();
    println!("acceptance criteria");
    if wanted(1) {
        run(&mut results, "criterion 1 (MAS oracle equivalence)", criterion_1);
    }
    if wanted(2) {
        run(&mut results, "criterion 2 (alignment invariants)", criterion_2);
    }
    if wanted(3) {
        run(&mut results, "criterion 3 (OT-CFM algebra)", criterion_3);
    }
    if wanted(4) {
        run(&mut results, "criterion 4 (analytic flow recovery)", criterion_4);
    }
    if wanted(5) {
        run(&mut results, "criterion 5 (gradient oracles)", criterion_5);
    }
    if wanted(6) {
        run(&mut results, "criterion 6 (guidance degeneracy)", criterion_6);
    }
    if wanted(7) {
        run(&mut results, "criterion 7 (toy overfit)", criterion_7);
    }
    if wanted(8) || wanted(9) {
        let trained = catch_unwind(AssertUnwindSafe(trained_pipeline));
        match &trained {
            Ok(t) => {
                if wanted(8) {
                    run(&mut results, "criterion 8 (end-to-end MCD-DTW vs shuffled baseline)", || criterion_8(t));
                }
                if wanted(9) {
                    match catch_unwind(AssertUnwindSafe(|| guidance_classifier(t))) {
                        Ok(classifier) => {
                            run(&mut results, "criterion 9 (intensity score shape)", || criterion_9(t, &classifier));
                            run(&mut results, "criterion 9 supplement (guided target-band energy)", || {
                                guidance_band_energy(t, &classifier)
                            });
                        }
                        Err(_) => {
                            println!("FAIL criterion 9: training the emotion classifier panicked");
                            results.push(false);
                        }
                    }
                }
            }
            Err(_) => {
                for n in [8, 9].into_iter().filter(|&n| wanted(n)) {
                    println!("FAIL criterion {n}: training the 500-sample pipeline panicked");
                    results.push(false);
                }
            }
        }
    }
    if wanted(10) {
        run(&mut results, "criterion 10 (determinism and persistence)", criterion_10);
    }
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} checks passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
