use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dubflow::corpus::{load_corpus, read_manifest};
use dubflow::trainer::EvalReport;
use dubflow::types::validate_sample;
use serde_json::Value;
use tempfile::TempDir;

fn dubflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dubflow"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("RUST_BACKTRACE", "0")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dubflow(dir, args);
    assert!(
        out.status.success(),
        "dubflow {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = dubflow(dir, args);
    assert!(!out.status.success(), "dubflow {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = r#"
seed = 0
[corpus]
count = 12
[train]
steps = 9
batch_size = 4
log_every = 2
[runtime]
checkpoint_every = 4
[classifier_train]
steps = 20
[eval.flow]
ode_steps = 3
"#;

fn workspace(config: &str) -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, config).unwrap();
    (tmp, cfg)
}

/// A tiny corpus plus a trained run with a classifier.
fn trained() -> TempDir {
    let (tmp, _) = workspace(TINY);
    let dir = tmp.path();
    ok(dir, &["generate-data", "--config", "run.toml", "--out", "corpus"]);
    ok(dir, &["train", "--config", "run.toml", "--corpus", "corpus", "--run", "run"]);
    ok(dir, &["train-classifier", "--corpus", "corpus", "--run", "run"]);
    tmp
}

#[test]
fn generate_data_is_reproducible_and_refuses_overwrite() {
    let (tmp, _) = workspace(TINY);
    let dir = tmp.path();
    ok(dir, &["generate-data", "--config", "run.toml", "--out", "a"]);
    ok(dir, &["generate-data", "--config", "run.toml", "--out", "b"]);
    let (a, b) = (read_manifest(&dir.join("a")).unwrap(), read_manifest(&dir.join("b")).unwrap());
    assert_eq!(a.checksums(), b.checksums());
    assert_eq!(a.config_hash, b.config_hash);
    let err = fails(dir, &["generate-data", "--config", "run.toml", "--out", "a"]);
    assert!(err.contains("--overwrite"), "{err}");
    ok(dir, &["generate-data", "--config", "run.toml", "--out", "a", "--overwrite", "--seed", "4"]);
    assert_ne!(read_manifest(&dir.join("a")).unwrap().checksums(), b.checksums());
    assert!(dir.join("a").join("config.toml").is_file());
}

#[test]
fn generated_corpus_of_500_validates() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["generate-data", "--seed", "0", "--count", "500", "--out", "c"]);
    let corpus = load_corpus(&tmp.path().join("c")).unwrap();
    assert_eq!(corpus.samples.len(), 500);
    let shape = corpus.manifest.config.sample_shape().unwrap();
    for s in &corpus.samples {
        assert!(validate_sample(s, &shape).is_empty());
    }
}

#[test]
fn missing_config_field_is_named() {
    let (tmp, _) = workspace("seed = 1\n");
    let err = fails(tmp.path(), &["generate-data", "--config", "run.toml", "--out", "c"]);
    assert!(err.contains("corpus.count"), "{err}");
    let err = fails(tmp.path(), &["generate-data", "--count", "3", "--out", "c"]);
    assert!(err.contains("`seed`"), "{err}");
    let err = fails(tmp.path(), &["generate-data", "--config", "run.toml", "--count", "3", "--set", "corpus.n_melz=4", "--out", "c"]);
    assert!(err.contains("n_melz"), "{err}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (tmp, _) = workspace(TINY);
    let dir = tmp.path();
    ok(dir, &["generate-data", "--config", "run.toml", "--out", "corpus"]);
    ok(dir, &["train", "--config", "run.toml", "--corpus", "corpus", "--run", "full"]);
    ok(dir, &["train", "--config", "run.toml", "--corpus", "corpus", "--run", "cut", "--stop-after", "6"]);
    assert!(!dir.join("cut").exists(), "an unfinished run must stay staged");
    assert!(dir.join("cut.partial").is_dir());
    ok(dir, &["train", "--resume", "--corpus", "corpus", "--run", "cut"]);
    assert!(!dir.join("cut.partial").exists());
    let read = |run: &str, rel: &str| fs::read(dir.join(run).join(rel)).unwrap();
    assert_eq!(read("full", "logs/metrics.jsonl"), read("cut", "logs/metrics.jsonl"));
    assert_eq!(read("full", "checkpoint/model.safetensors"), read("cut", "checkpoint/model.safetensors"));
    assert_eq!(read("full", "config.toml"), read("cut", "config.toml"));
    for sub in ["checkpoint", "logs", "reports", "renders"] {
        assert!(dir.join("full").join(sub).is_dir(), "missing {sub}/");
    }
}

#[test]
fn strict_flag_escalates_hash_mismatch() {
    let (tmp, _) = workspace(TINY);
    let dir = tmp.path();
    ok(dir, &["generate-data", "--config", "run.toml", "--out", "corpus"]);
    let args = ["train", "--config", "run.toml", "--corpus", "corpus", "--set", "corpus.noise_std=0.5", "--set", "train.steps=1"];
    let out = ok(dir, &[&args[..], &["--run", "lenient"]].concat());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
    let err = fails(dir, &[&args[..], &["--run", "strict", "--strict"]].concat());
    assert!(err.contains("strict"), "{err}");
}

fn render_json(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("render.json")).unwrap()).unwrap()
}

#[test]
fn synthesize_flags_and_guidance() {
    let tmp = trained();
    let dir = tmp.path();
    let base = ["synthesize", "--run", "run", "--corpus", "corpus", "--sample", "10", "--seed", "3"];
    ok(dir, &[&base[..], &["--out", "plain"]].concat());
    ok(dir, &[&base[..], &["--emotion", "2", "--alpha", "5.0", "--beta", "1.7", "--gamma", "0", "--out", "g0"]].concat());
    let mel = |d: &str| fs::read(dir.join(d).join("mel.safetensors")).unwrap();
    assert_eq!(mel("plain"), mel("g0"));
    assert!(dir.join("plain").join("mel.png").is_file());

    let guided_args = [&base[..], &["--emotion", "2", "--alpha", "5.0", "--beta", "1.7", "--out", "sad"]].concat();
    ok(dir, &guided_args);
    assert_ne!(mel("plain"), mel("sad"));
    let record = render_json(&dir.join("sad"));
    let argv: Vec<&str> = record["argv"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(argv, guided_args);
    assert_eq!(record["emotion"], 2);
    assert_eq!(record["alpha"], 5.0);
    assert_eq!(record["beta"], 1.7);
    let before = record["probabilities_unguided"][2].as_f64().unwrap();
    let after = record["probabilities_guided"][2].as_f64().unwrap();
    assert!(after > before, "p(sad) {before} -> {after}");

    let err = fails(dir, &[&base[..], &["--emotion", "9"]].concat());
    assert!(err.contains("valid ids are 0, 1, 2, 3, 4, 5, 6"), "{err}");
}

#[test]
fn sweep_covers_the_grid_and_eval_is_reproducible() {
    let tmp = trained();
    let dir = tmp.path();
    ok(
        dir,
        &["sweep-guidance", "--run", "run", "--corpus", "corpus", "--alphas", "0,1,2.5,5", "--betas", "0,1,2", "--samples", "1", "--steps", "2", "--out", "sweep"],
    );
    let table: Value = serde_json::from_slice(&fs::read(dir.join("sweep/intensity.json")).unwrap()).unwrap();
    assert_eq!(table["cells"].as_array().unwrap().len(), 7 * 12);
    let csv = fs::read_to_string(dir.join("sweep/intensity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7 * 12);
    for b in ["0", "1", "2"] {
        assert!(dir.join(format!("sweep/is_beta_{b}.png")).is_file());
    }

    let eval = ["eval", "--run", "run", "--corpus", "corpus", "--samples", "1", "--steps", "2"];
    ok(dir, &[&eval[..], &["--out", "e1"]].concat());
    ok(dir, &[&eval[..], &["--out", "e2"]].concat());
    let a = fs::read(dir.join("e1/report.json")).unwrap();
    assert_eq!(a, fs::read(dir.join("e2/report.json")).unwrap());
    let report: EvalReport = serde_json::from_slice(&a).unwrap();
    assert!((0.0..=1.0).contains(&report.mas_exact_match));
    assert_eq!(report.intensity.len(), 7 * 4 * 3);
    for f in ["mel_comparison.png", "attention.png", "config.toml"] {
        assert!(dir.join("e1").join(f).is_file(), "missing {f}");
    }
}
