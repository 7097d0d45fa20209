//! `dubflow`: corpus generation, training, emotion-guided synthesis and
//! evaluation from the command line.

mod commands;
mod config;
mod plot;
mod run;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{ConfigArgs, SamplerArgs};

#[derive(Parser)]
#[command(name = "dubflow", version, about = "Emotion-controllable lip-synchronous mel synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file and overrides; flags beat the file, the file beats defaults.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set train.batch_size=8`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Global seed; also the default corpus, training and sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigFlags {
    fn into_args(self, extra: Vec<(String, toml::Value)>) -> Result<ConfigArgs> {
        let mut overrides = Vec::new();
        for s in &self.set {
            overrides.push(config::parse_assignment(s)?);
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), toml::Value::Integer(i64::try_from(seed)?)));
        }
        overrides.extend(extra);
        Ok(ConfigArgs {
            file: self.config,
            overrides,
        })
    }
}

#[derive(Args, Clone)]
struct SamplerFlags {
    /// ODE steps of the flow sampler.
    #[arg(long)]
    steps: Option<usize>,
    /// Noise seed of the sampler.
    #[arg(long)]
    seed: Option<u64>,
    /// `euler` or `midpoint`.
    #[arg(long, value_parser = commands::parse_solver)]
    solver: Option<dubflow::flow::Solver>,
    /// Scale of the starting noise.
    #[arg(long)]
    temperature: Option<f64>,
}

impl From<SamplerFlags> for SamplerArgs {
    fn from(f: SamplerFlags) -> Self {
        SamplerArgs {
            steps: f.steps,
            seed: f.seed,
            solver: f.solver,
            temperature: f.temperature,
        }
    }
}

/// Comma-separated list of guidance weights.
#[derive(Clone)]
struct Grid(Vec<f64>);

fn parse_grid(text: &str) -> Result<Grid, String> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Grid)
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenerateData {
        #[command(flatten)]
        config: ConfigFlags,
        /// Number of samples (`corpus.count`).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the acoustic pipeline and flow decoder.
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// Total training steps (`train.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Continue an interrupted or finished run from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed steps, leaving a resumable run.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Treat a corpus/config mismatch as an error.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the noise-aware emotion classifier used for guidance.
    TrainClassifier {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Classifier training steps (`classifier_train.steps`).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        strict: bool,
    },
    /// Render one corpus sample, optionally with emotion guidance.
    Synthesize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus index of the sample to render.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Target emotion id.
        #[arg(long)]
        emotion: Option<usize>,
        /// Positive guidance weight (default 1).
        #[arg(long)]
        alpha: Option<f64>,
        /// Negative guidance weight (default 0).
        #[arg(long)]
        beta: Option<f64>,
        /// Guidance scale (default `eval.gamma`).
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Intensity Score over an (emotion, alpha, beta) grid on the held-out split.
    SweepGuidance {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated alpha grid.
        #[arg(long, value_parser = parse_grid)]
        alphas: Option<Grid>,
        /// Comma-separated beta grid.
        #[arg(long, value_parser = parse_grid)]
        betas: Option<Grid>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Held-out samples per cell; 0 uses the whole split.
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Evaluate a trained run on the held-out split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Held-out samples per intensity cell; 0 uses the whole split.
        #[arg(long)]
        samples: Option<usize>,
        /// Skip the intensity sweep.
        #[arg(long)]
        no_sweep: bool,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        strict: bool,
    },
}

fn int(v: usize) -> Result<toml::Value> {
    Ok(toml::Value::Integer(i64::try_from(v)?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match Cli::parse().command {
        Command::GenerateData {
            config,
            count,
            out,
            overwrite,
        } => {
            let extra = count.map(|c| int(c).map(|v| ("corpus.count".to_string(), v))).transpose()?;
            commands::generate_data(&config.into_args(extra.into_iter().collect())?, &out, overwrite)
        }
        Command::Train {
            config,
            corpus,
            run,
            steps,
            resume,
            stop_after,
            strict,
            overwrite,
        } => commands::train(
            &config.into_args(Vec::new())?,
            &commands::TrainArgs {
                corpus,
                run,
                resume,
                stop_after,
                strict,
                overwrite,
                steps,
            },
        ),
        Command::TrainClassifier {
            config,
            corpus,
            run,
            steps,
            strict,
        } => commands::train_classifier_cmd(
            &config.into_args(Vec::new())?,
            &commands::ClassifierArgs {
                corpus,
                run,
                strict,
                steps,
            },
        ),
        Command::Synthesize {
            run,
            corpus,
            sample,
            emotion,
            alpha,
            beta,
            gamma,
            sampler,
            out,
            strict,
        } => commands::synthesize_cmd(&commands::SynthArgs {
            run,
            corpus,
            sample,
            emotion,
            alpha,
            beta,
            gamma,
            sampler: sampler.into(),
            out,
            strict,
            argv,
        }),
        Command::SweepGuidance {
            run,
            corpus,
            alphas,
            betas,
            gamma,
            samples,
            sampler,
            out,
            strict,
        } => commands::sweep_guidance(&commands::SweepArgs {
            run,
            corpus,
            alphas: alphas.map(|g| g.0),
            betas: betas.map(|g| g.0),
            gamma,
            samples,
            sampler: sampler.into(),
            out,
            strict,
        }),
        Command::Eval {
            run,
            corpus,
            out,
            samples,
            no_sweep,
            sampler,
            strict,
        } => commands::eval_cmd(&commands::EvalArgs {
            run,
            corpus,
            out,
            samples,
            no_sweep,
            sampler: sampler.into(),
            strict,
        }),
    }
}
