//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dubflow::corpus::generate_corpus;
use dubflow::flow::{FlowConfig, Solver};
use dubflow::guidance::{batched_probs, train_classifier, EmotionClassifier, GuidanceParams};
use dubflow::store::{ArrayFile, NamedArray};
use dubflow::trainer::{
    alignment_diagnostics, attention_maps, data_dims, evaluate, has_classifier, intensity_grid, intensity_shape,
    load_checkpoint, load_classifier, save_checkpoint, save_classifier, synthesize, EvalConfig,
    GuidanceSpec, IntensityCell, Pipeline, Render, StepMetrics, Trainer,
};
use dubflow::types::{validate_sample, CorpusSample, EmotionInstruction};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::config::{self, RunConfig, RESOLVED_CONFIG};
use crate::plot::{self, Series, PALETTE};
use crate::run::{self, CHECKPOINT, LOGS, RENDERS, REPORTS};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CLASSIFIER_LOG: &str = "classifier.jsonl";

/// Configuration sources shared by commands that resolve a fresh config.
pub struct ConfigArgs {
    pub file: Option<PathBuf>,
    pub overrides: Vec<(String, toml::Value)>,
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let file = self.file.as_deref().or(fallback);
        let resolved = config::resolve(file, &self.overrides)?;
        resolved.log();
        Ok(resolved.config)
    }
}

pub fn generate_data(cfg: &ConfigArgs, out: &Path, overwrite: bool) -> Result<()> {
    let config = cfg.resolve(None)?;
    let corpus = &config.corpus;
    let staging = run::begin(out, overwrite)?;
    let start = Instant::now();
    let samples = generate_corpus(&corpus.config, corpus.count)?;
    let shape = corpus.config.sample_shape()?;
    for (i, s) in samples.iter().enumerate() {
        let report = validate_sample(s, &shape);
        if !report.is_empty() {
            bail!("generated sample {i} failed validation: {:?}", report.violations);
        }
    }
    let manifest = dubflow::corpus::save_corpus(&samples, &corpus.config, &staging)?;
    run::write_config(&staging, &config)?;
    run::promote(&staging, out)?;
    log::info!(
        "wrote {} samples to {} (config hash {}) in {:.1}s",
        manifest.count,
        out.display(),
        manifest.config_hash,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub run: PathBuf,
    pub resume: bool,
    pub stop_after: Option<usize>,
    pub strict: bool,
    pub overwrite: bool,
    pub steps: Option<usize>,
}

fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: StepMetrics = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if m.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    run::write_text(path, &kept)
}

pub fn train(cfg: &ConfigArgs, args: &TrainArgs) -> Result<()> {
    let target = &args.run;
    let staging = run::staging_path(target);
    let config = if args.resume {
        if cfg.file.is_some() || !cfg.overrides.is_empty() {
            bail!("--resume continues with the run's saved configuration; only --steps may change");
        }
        if !staging.is_dir() {
            if target.join(CHECKPOINT).is_dir() {
                fs::rename(target, &staging)
                    .with_context(|| format!("reopening {}", target.display()))?;
            } else {
                bail!("nothing to resume at {}", target.display());
            }
        }
        let mut config = run::run_config(&staging)?;
        if let Some(steps) = args.steps {
            config.train.steps = steps;
            run::write_config(&staging, &config)?;
        }
        config
    } else {
        let mut overrides = cfg.overrides.clone();
        if let Some(steps) = args.steps {
            overrides.push(("train.steps".into(), toml::Value::Integer(steps as i64)));
        }
        let config = ConfigArgs {
            file: cfg.file.clone(),
            overrides,
        }
        .resolve(None)?;
        let staging = run::begin(target, args.overwrite)?;
        run::create_layout(&staging)?;
        run::write_config(&staging, &config)?;
        config
    };
    let corpus = run::open_corpus(&args.corpus, &config, args.strict)?;
    let (train_idx, _) = config.split(corpus.samples.len());
    let samples: Vec<CorpusSample> = train_idx.iter().map(|&i| corpus.samples[i].clone()).collect();
    let dims = data_dims(&corpus.manifest.config)?;

    let checkpoint_dir = staging.join(CHECKPOINT);
    let mut trainer = if checkpoint_dir.join("manifest.json").is_file() {
        let (mut trainer, manifest) = load_checkpoint(&checkpoint_dir)?;
        if manifest.model != config.model || manifest.dims != dims {
            bail!("checkpoint in {} does not match the run configuration", staging.display());
        }
        trainer.config.steps = config.train.steps;
        log::info!("resuming from step {}", trainer.step);
        trainer
    } else {
        Trainer::new(Pipeline::new(dims, config.model.clone(), config.train.seed)?, config.train.clone())?
    };
    let metrics_path = staging.join(LOGS).join(METRICS_LOG);
    truncate_metrics(&metrics_path, trainer.step)?;
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;

    let end = args.stop_after.map_or(config.train.steps, |s| s.min(config.train.steps));
    let corpus_hash = corpus.manifest.config_hash.clone();
    let start = Instant::now();
    let first = trainer.step;
    while trainer.step < end {
        let next = ((trainer.step / config.runtime.checkpoint_every) + 1) * config.runtime.checkpoint_every;
        let mut lines = String::new();
        trainer.run(&samples, Some(next.min(end)), &mut |m| {
            lines.push_str(&serde_json::to_string(m)?);
            lines.push('\n');
            log::info!(
                "step {} loss {:.4} cfm {:.4} lr {:.2e} mas_exact {:.2}",
                m.step,
                m.total,
                m.cfm,
                m.learning_rate,
                m.mas_exact
            );
            Ok(())
        })?;
        log_file.write_all(lines.as_bytes())?;
        log_file.flush()?;
        save_checkpoint(&checkpoint_dir, &trainer, Some(&corpus_hash))?;
        let done = trainer.step - first;
        log::info!(
            "checkpoint at step {} ({:.2}s/step)",
            trainer.step,
            start.elapsed().as_secs_f64() / done.max(1) as f64
        );
    }
    if trainer.step < config.train.steps {
        log::warn!(
            "stopped at step {} of {}; continue with `dubflow train --resume --run {}`",
            trainer.step,
            config.train.steps,
            target.display()
        );
        return Ok(());
    }
    let train_refs: Vec<&CorpusSample> = samples.iter().collect();
    let diagnostics = alignment_diagnostics(&trainer.pipeline, &train_refs)?;
    run::write_json(
        &staging.join(REPORTS).join("train_summary.json"),
        &json!({
            "step": trainer.step,
            "train_samples": samples.len(),
            "corpus_config_hash": corpus_hash,
            "diagnostics": diagnostics,
        }),
    )?;
    run::promote(&staging, target)?;
    log::info!("training finished at step {}: {diagnostics:?}", trainer.step);
    Ok(())
}

pub struct ClassifierArgs {
    pub corpus: PathBuf,
    pub run: PathBuf,
    pub strict: bool,
    pub steps: Option<usize>,
}

pub fn train_classifier_cmd(cfg: &ConfigArgs, args: &ClassifierArgs) -> Result<()> {
    let saved = args.run.join(RESOLVED_CONFIG);
    let mut overrides = cfg.overrides.clone();
    if let Some(steps) = args.steps {
        overrides.push(("classifier_train.steps".into(), toml::Value::Integer(steps as i64)));
    }
    let config = ConfigArgs {
        file: cfg.file.clone(),
        overrides,
    }
    .resolve(saved.is_file().then_some(saved.as_path()))?;
    let corpus = run::open_corpus(&args.corpus, &config, args.strict)?;
    let (train_idx, held_idx) = config.split(corpus.samples.len());
    let train = run::pick(&corpus.samples, &train_idx);
    let held = run::pick(&corpus.samples, &held_idx);
    let n_mels = corpus.manifest.config.n_mels;
    let n_classes = corpus.manifest.config.n_emotions;

    let staging = args.run.join(".classifier.partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut lines = String::new();
    let start = Instant::now();
    let trained = train_classifier(
        &train,
        &held,
        n_mels,
        n_classes,
        &config.classifier,
        &config.classifier_train,
        config.seed,
        &mut |step, loss| {
            lines.push_str(&json!({"step": step, "loss": loss}).to_string());
            lines.push('\n');
            if step % 50 == 0 {
                log::info!("classifier step {step} loss {loss:.4}");
            }
        },
    )?;
    save_classifier(&staging, &trained, n_mels)?;
    run::write_text(&staging.join(CLASSIFIER_LOG), &lines)?;
    run::write_json(&staging.join("classifier_report.json"), &trained.report)?;
    run::write_text(&staging.join("classifier_config.toml"), &config.to_toml()?)?;

    run::create_layout(&args.run)?;
    let moves = [
        ("classifier.json", CHECKPOINT),
        ("classifier.safetensors", CHECKPOINT),
        (CLASSIFIER_LOG, LOGS),
        ("classifier_report.json", REPORTS),
        ("classifier_config.toml", "."),
    ];
    for (name, dir) in moves {
        fs::rename(staging.join(name), args.run.join(dir).join(name))
            .with_context(|| format!("promoting {name}"))?;
    }
    fs::remove_dir_all(&staging)?;
    log::info!(
        "classifier trained in {:.1}s: held-out clean accuracy {:.3}, by t {:?}",
        start.elapsed().as_secs_f64(),
        trained.report.holdout_accuracy_clean,
        trained.report.holdout_accuracy_by_t
    );
    Ok(())
}

struct LoadedRun {
    config: RunConfig,
    pipeline: Pipeline,
    step: usize,
    classifier: Option<EmotionClassifier>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = run::run_config(dir)?;
    let ckpt = dir.join(CHECKPOINT);
    let (trainer, manifest) = load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let classifier = if has_classifier(&ckpt) {
        Some(load_classifier(&ckpt)?.0)
    } else {
        None
    };
    Ok(LoadedRun {
        config,
        pipeline: trainer.pipeline,
        step: manifest.step,
        classifier,
    })
}

fn require_classifier<'a>(run: &'a LoadedRun, dir: &Path) -> Result<&'a EmotionClassifier> {
    run.classifier
        .as_ref()
        .with_context(|| format!("{} has no emotion classifier; run `dubflow train-classifier` first", dir.display()))
}

pub fn parse_solver(text: &str) -> Result<Solver> {
    serde_json::from_value(serde_json::Value::String(text.to_string()))
        .with_context(|| format!("unknown solver `{text}`; expected euler or midpoint"))
}

/// Overrides of the flow sampler and noise seed shared by the rendering
/// commands.
#[derive(Debug, Clone, Default)]
pub struct SamplerArgs {
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub solver: Option<Solver>,
    pub temperature: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, eval: &mut EvalConfig) {
        if let Some(s) = self.steps {
            eval.flow.ode_steps = s;
        }
        if let Some(s) = self.seed {
            eval.seed = s;
        }
        if let Some(s) = self.solver {
            eval.flow.solver = s;
        }
        if let Some(t) = self.temperature {
            eval.flow.temperature = t;
        }
    }
}

pub struct SynthArgs {
    pub run: PathBuf,
    pub corpus: PathBuf,
    pub sample: usize,
    pub emotion: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub sampler: SamplerArgs,
    pub out: Option<PathBuf>,
    pub strict: bool,
    /// Command-line arguments as given, echoed into the metadata.
    pub argv: Vec<String>,
}

#[derive(Serialize)]
struct RenderRecord<'a> {
    argv: &'a [String],
    sample: usize,
    checkpoint_step: usize,
    seed: u64,
    flow: &'a FlowConfig,
    emotion: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: f64,
    negative_mode: dubflow::guidance::NegativeMode,
    mel_frames: usize,
    durations: &'a [u32],
    decoded: &'a [u32],
    probabilities_unguided: Option<Vec<f64>>,
    probabilities_guided: Option<Vec<f64>>,
}

fn mel_file(render: &Render) -> ArrayFile {
    let mut file = ArrayFile::default();
    let (m, d) = render.mel.dim();
    file.insert("mel", NamedArray::f32(vec![m, d], render.mel.iter().copied().collect()));
    let dur = render.durations.as_slice();
    file.insert("durations", NamedArray::u32(vec![dur.len()], dur.to_vec()));
    file
}

fn valid_ids(n: usize) -> String {
    (0..n).map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn synthesize_cmd(args: &SynthArgs) -> Result<()> {
    let loaded = load_run(&args.run)?;
    let mut eval = loaded.config.eval.clone();
    args.sampler.apply(&mut eval);
    let n = loaded.pipeline.dims.n_emotions;
    if args.emotion.is_none() && (args.alpha.is_some() || args.beta.is_some()) {
        bail!("--alpha and --beta require --emotion");
    }
    if let Some(c) = args.emotion {
        if c >= n {
            bail!("unknown emotion id {c}; valid ids are {}", valid_ids(n));
        }
    }
    let gamma = args.gamma.unwrap_or(eval.gamma);
    let params = match args.emotion {
        Some(c) => Some(GuidanceParams {
            gamma,
            instruction: EmotionInstruction::new(c, args.alpha.unwrap_or(1.0), args.beta.unwrap_or(0.0), n)?,
        }),
        None => None,
    };
    if let Some(p) = &params {
        p.validate(n)?;
    }
    let active = params.as_ref().is_some_and(|p| !p.is_inert());
    let classifier = if active {
        Some(require_classifier(&loaded, &args.run)?)
    } else {
        loaded.classifier.as_ref()
    };

    let corpus = run::open_corpus(&args.corpus, &loaded.config, args.strict)?;
    let sample = corpus.samples.get(args.sample).with_context(|| {
        format!("sample {} out of range; corpus has {} samples", args.sample, corpus.samples.len())
    })?;
    let render_one = |spec: Option<&GuidanceSpec<'_>>| -> Result<Render> {
        Ok(synthesize(&loaded.pipeline, &[sample], spec, &eval.flow, eval.seed)?.remove(0))
    };
    let unguided = if params.is_none() || active {
        Some(render_one(None)?)
    } else {
        None
    };
    let guided = match (&params, classifier) {
        (Some(p), Some(c)) => Some(render_one(Some(&GuidanceSpec {
            classifier: c,
            params: *p,
            mode: eval.negative_mode,
        }))?),
        (Some(p), None) => {
            // Inert guidance never consults the classifier.
            debug_assert!(p.is_inert());
            None
        }
        (None, _) => None,
    };
    let probs = |r: &Render| -> Result<Option<Vec<f64>>> {
        match classifier {
            Some(c) => Ok(Some(batched_probs(c, std::slice::from_ref(&r.mel), 1.0, 1)?.remove(0))),
            None => Ok(None),
        }
    };
    let output = guided.as_ref().or(unguided.as_ref()).expect("a render exists");
    let probabilities_unguided = match &unguided {
        Some(r) => probs(r)?,
        None => None,
    };
    let probabilities_guided = match &guided {
        Some(r) => probs(r)?,
        None => None,
    };

    let name = match args.emotion {
        Some(c) => format!(
            "sample{}_seed{}_e{c}_a{}_b{}_g{gamma}",
            args.sample,
            eval.seed,
            args.alpha.unwrap_or(1.0),
            args.beta.unwrap_or(0.0)
        ),
        None => format!("sample{}_seed{}", args.sample, eval.seed),
    };
    let out = args.out.clone().unwrap_or_else(|| args.run.join(RENDERS).join(name));
    let staging = run::begin(&out, true)?;
    dubflow::store::write_atomic(&staging.join("mel.safetensors"), &mel_file(output).to_bytes()?)?;
    plot::save(&plot::heatmap(&output.mel, 3), &staging.join("mel.png"))?;
    let record = RenderRecord {
        argv: &args.argv,
        sample: args.sample,
        checkpoint_step: loaded.step,
        seed: eval.seed,
        flow: &eval.flow,
        emotion: args.emotion,
        alpha: args.emotion.map(|_| args.alpha.unwrap_or(1.0)),
        beta: args.emotion.map(|_| args.beta.unwrap_or(0.0)),
        gamma,
        negative_mode: eval.negative_mode,
        mel_frames: output.mel.nrows(),
        durations: output.durations.as_slice(),
        decoded: &output.decoded,
        probabilities_unguided,
        probabilities_guided,
    };
    run::write_json(&staging.join("render.json"), &record)?;
    run::write_config(&staging, &loaded.config)?;
    run::promote(&staging, &out)?;
    log::info!("wrote render to {}", out.display());
    Ok(())
}

pub struct SweepArgs {
    pub run: PathBuf,
    pub corpus: PathBuf,
    pub alphas: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub samples: Option<usize>,
    pub sampler: SamplerArgs,
    pub out: Option<PathBuf>,
    pub strict: bool,
}

fn curve_plots(dir: &Path, cells: &[IntensityCell], n: usize, prefix: &str) -> Result<Vec<String>> {
    let mut betas: Vec<f64> = cells.iter().map(|c| c.beta).collect();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let mut files = Vec::new();
    for b in betas {
        let series: Vec<Series> = (0..n)
            .map(|e| Series {
                points: cells
                    .iter()
                    .filter(|c| c.emotion == e && c.beta == b)
                    .map(|c| (c.alpha, c.score))
                    .collect(),
                color: PALETTE[e % PALETTE.len()],
            })
            .collect();
        let name = format!("{prefix}_beta_{b}.png");
        plot::save(&plot::line_chart(&series, (0.0, 1.0), 480, 320), &dir.join(&name))?;
        files.push(name);
    }
    Ok(files)
}

fn intensity_csv(cells: &[IntensityCell]) -> String {
    let mut csv = String::from("emotion,alpha,beta,intensity_score\n");
    for c in cells {
        csv.push_str(&format!("{},{},{},{}\n", c.emotion, c.alpha, c.beta, c.score));
    }
    csv
}

pub fn sweep_guidance(args: &SweepArgs) -> Result<()> {
    let loaded = load_run(&args.run)?;
    let classifier = require_classifier(&loaded, &args.run)?;
    let mut eval = loaded.config.eval.clone();
    args.sampler.apply(&mut eval);
    if let Some(a) = &args.alphas {
        eval.alpha_grid = a.clone();
    }
    if let Some(b) = &args.betas {
        eval.beta_grid = b.clone();
    }
    if let Some(g) = args.gamma {
        eval.gamma = g;
    }
    if let Some(k) = args.samples {
        eval.intensity_samples = k;
    }
    if eval.alpha_grid.is_empty() || eval.beta_grid.is_empty() {
        bail!("guidance grids must be non-empty");
    }
    let corpus = run::open_corpus(&args.corpus, &loaded.config, args.strict)?;
    let (_, held_idx) = loaded.config.split(corpus.samples.len());
    let mut held = run::pick(&corpus.samples, &held_idx);
    if eval.intensity_samples > 0 {
        held.truncate(eval.intensity_samples);
    }
    let n = loaded.pipeline.dims.n_emotions;
    let out = args.out.clone().unwrap_or_else(|| args.run.join(REPORTS).join("sweep"));
    let staging = run::begin(&out, true)?;
    let total = n * eval.alpha_grid.len() * eval.beta_grid.len();
    let start = Instant::now();
    let mut done = 0;
    let cells = intensity_grid(&loaded.pipeline, classifier, &held, &eval, &mut |c| {
        done += 1;
        log::info!(
            "cell {done}/{total}: emotion {} alpha {} beta {} IS {:.4} ({:.0}s)",
            c.emotion,
            c.alpha,
            c.beta,
            c.score,
            start.elapsed().as_secs_f64()
        );
    })?;
    let shape = intensity_shape(&cells, n);
    let plots = curve_plots(&staging, &cells, n, "is")?;
    run::write_json(
        &staging.join("intensity.json"),
        &json!({
            "checkpoint_step": loaded.step,
            "samples": held.len(),
            "eval": eval,
            "cells": cells,
            "shape": shape,
            "plots": plots,
        }),
    )?;
    run::write_text(&staging.join("intensity.csv"), &intensity_csv(&cells))?;
    let mut config = loaded.config.clone();
    config.eval = eval;
    run::write_config(&staging, &config)?;
    run::promote(&staging, &out)?;
    log::info!("sweep of {} cells written to {}: {shape:?}", cells.len(), out.display());
    Ok(())
}

pub struct EvalArgs {
    pub run: PathBuf,
    pub corpus: PathBuf,
    pub out: Option<PathBuf>,
    pub samples: Option<usize>,
    pub no_sweep: bool,
    pub sampler: SamplerArgs,
    pub strict: bool,
}

fn attention_map(pipeline: &Pipeline, sample: &CorpusSample) -> Result<Array2<f32>> {
    Ok(attention_maps(pipeline, &[sample])?.remove(0).mapv(|v| v as f32))
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let loaded = load_run(&args.run)?;
    let mut eval = loaded.config.eval.clone();
    args.sampler.apply(&mut eval);
    if let Some(k) = args.samples {
        eval.intensity_samples = k;
    }
    let corpus = run::open_corpus(&args.corpus, &loaded.config, args.strict)?;
    let (_, held_idx) = loaded.config.split(corpus.samples.len());
    let held = run::pick(&corpus.samples, &held_idx);
    let classifier = if args.no_sweep { None } else { loaded.classifier.as_ref() };
    if !args.no_sweep && classifier.is_none() {
        log::warn!("no emotion classifier in {}; skipping the intensity sweep", args.run.display());
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.join(REPORTS).join("eval"));
    let staging = run::begin(&out, true)?;
    let start = Instant::now();
    let report = evaluate(&loaded.pipeline, loaded.step, classifier, &held, &eval)?;
    run::write_json(&staging.join("report.json"), &report)?;

    let first = held[0];
    let render = synthesize(&loaded.pipeline, &[first], None, &eval.flow, eval.seed)?.remove(0);
    let comparison = plot::stack(&[plot::heatmap(&first.mel, 3), plot::heatmap(&render.mel, 3)], 6);
    plot::save(&comparison, &staging.join("mel_comparison.png"))?;
    plot::save(
        &plot::heatmap(&attention_map(&loaded.pipeline, first)?, 8),
        &staging.join("attention.png"),
    )?;
    if !report.intensity.is_empty() {
        curve_plots(&staging, &report.intensity, loaded.pipeline.dims.n_emotions, "intensity")?;
        run::write_text(&staging.join("intensity.csv"), &intensity_csv(&report.intensity))?;
    }
    let mut config = loaded.config.clone();
    config.eval = eval;
    run::write_config(&staging, &config)?;
    run::promote(&staging, &out)?;
    log::info!(
        "eval of {} held-out samples in {:.1}s: MCD-DTW {:.3} vs shuffled {:.3} ({:.1}% better), MAS exact {:.3}, PER {:.4}",
        report.samples,
        start.elapsed().as_secs_f64(),
        report.mcd_dtw,
        report.baseline_mcd_dtw,
        100.0 * report.mcd_relative_improvement,
        report.mas_exact_match,
        report.phoneme_error_rate
    );
    Ok(())
}
