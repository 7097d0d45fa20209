//! Layered run configuration: command-line flags over a TOML file over the
//! built-in profile defaults.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dubflow::corpus::CorpusConfig;
use dubflow::guidance::{ClassifierConfig, ClassifierTrainConfig};
use dubflow::trainer::{EvalConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Name of the resolved configuration written into every output directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small model and fast schedule sized for a single CPU core.
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    pub count: usize,
    #[serde(flatten)]
    pub config: CorpusConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    /// Completed steps between checkpoints.
    pub checkpoint_every: usize,
    /// Trailing share of the corpus held out from pipeline and classifier
    /// training and used by eval and sweeps.
    pub holdout_fraction: f64,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 250,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub eval: EvalConfig,
    pub runtime: RuntimeSection,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Indices of the training and held-out samples of an `n`-sample corpus.
    pub fn split(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        dubflow::guidance::holdout_split(n, self.runtime.holdout_fraction)
    }
}

/// Where a resolved field came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Seed,
    Default,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Seed => "global seed",
            Source::Default => "default",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    /// Every leaf field with its value and origin, in path order.
    pub fields: Vec<(String, String, Source)>,
}

impl Resolved {
    pub fn log(&self) {
        for (path, value, source) in &self.fields {
            log::info!("config {path} = {value} ({source})");
        }
    }
}

/// Parses `path=value`; the value is read as a TOML literal and falls back
/// to a plain string.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (path, raw) = text
        .split_once('=')
        .with_context(|| format!("override `{text}` is not of the form path=value"))?;
    let path = path.trim();
    if path.is_empty() {
        bail!("override `{text}` has an empty path");
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path.to_string(), value))
}

fn profile_defaults(profile: Profile) -> Result<Table> {
    let (model, train) = match profile {
        Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
        Profile::Full => (ModelConfig::default(), TrainConfig::default()),
    };
    let mut t = Table::new();
    t.insert("profile".into(), Value::try_from(profile)?);
    t.insert("corpus".into(), Value::try_from(CorpusConfig::default())?);
    t.insert("model".into(), Value::try_from(model)?);
    t.insert("train".into(), Value::try_from(train)?);
    t.insert("classifier".into(), Value::try_from(ClassifierConfig::default())?);
    t.insert("classifier_train".into(), Value::try_from(ClassifierTrainConfig::default())?);
    t.insert("eval".into(), Value::try_from(EvalConfig::default())?);
    t.insert("runtime".into(), Value::try_from(RuntimeSection::default())?);
    Ok(t)
}

fn get<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut current = table.get(parts.next()?)?;
    for part in parts {
        current = current.as_table()?.get(part)?;
    }
    Some(current)
}

fn set(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        current = entry
            .as_table_mut()
            .with_context(|| format!("`{part}` in `{path}` is not a section"))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: &Table) {
    for (key, value) in over {
        match (base.get_mut(key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

fn leaves(prefix: &str, table: &Table, out: &mut Vec<(String, String)>) {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            Value::Table(t) => leaves(&path, t, out),
            v => out.push((path, v.to_string())),
        }
    }
}

const SEEDED: [&str; 3] = ["corpus.seed", "train.seed", "eval.seed"];
const REQUIRED: [&str; 2] = ["seed", "corpus.count"];

/// Resolves the run configuration. `file` may be absent; `flags` are
/// applied last in order.
pub fn resolve(file: Option<&Path>, flags: &[(String, Value)]) -> Result<Resolved> {
    let file_table = match file {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?
            .parse::<Table>()
            .with_context(|| format!("parsing config {}", path.display()))?,
        None => Table::new(),
    };
    resolve_tables(file_table, flags)
}

pub fn resolve_tables(file_table: Table, flags: &[(String, Value)]) -> Result<Resolved> {
    let mut layered = file_table.clone();
    for (path, value) in flags {
        set(&mut layered, path, value.clone())?;
    }
    for field in REQUIRED {
        if get(&layered, field).is_none() {
            bail!("missing required config field `{field}`");
        }
    }
    let profile: Profile = match get(&layered, "profile") {
        Some(v) => v.clone().try_into().context("field `profile` must be \"desk\" or \"full\"")?,
        None => Profile::default(),
    };
    let seed = get(&layered, "seed").cloned().expect("checked above");
    let mut seeded = BTreeSet::new();
    for field in SEEDED {
        if get(&layered, field).is_none() {
            set(&mut layered, field, seed.clone())?;
            seeded.insert(field);
        }
    }
    let mut full = profile_defaults(profile)?;
    merge(&mut full, &layered);
    let config: RunConfig = Value::Table(full.clone())
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", e.message()))?;
    validate(&config)?;

    let canonical: Table = toml::from_str(&config.to_toml()?)?;
    let mut flat = Vec::new();
    leaves("", &canonical, &mut flat);
    let known: BTreeSet<&str> = flat.iter().map(|(p, _)| p.as_str()).collect();
    let mut given = Vec::new();
    leaves("", &full, &mut given);
    if let Some((path, _)) = given.iter().find(|(p, _)| !known.contains(p.as_str())) {
        bail!("unknown config field `{path}`");
    }
    let from_flag = |p: &str| {
        flags
            .iter()
            .any(|(f, _)| p == f || p.starts_with(&format!("{f}.")))
    };
    let fields = flat
        .into_iter()
        .map(|(path, value)| {
            let source = if from_flag(&path) {
                Source::Flag
            } else if get(&file_table, &path).is_some() {
                Source::File
            } else if seeded.contains(path.as_str()) {
                Source::Seed
            } else {
                Source::Default
            };
            (path, value, source)
        })
        .collect();
    Ok(Resolved { config, fields })
}

fn validate(config: &RunConfig) -> Result<()> {
    config.corpus.config.validate()?;
    config.model.validate()?;
    config.train.validate()?;
    if config.corpus.count == 0 {
        bail!("corpus.count must be positive");
    }
    let f = config.runtime.holdout_fraction;
    if !(f > 0.0 && f < 1.0) {
        bail!("runtime.holdout_fraction must lie in (0, 1), got {f}");
    }
    if config.runtime.checkpoint_every == 0 {
        bail!("runtime.checkpoint_every must be positive");
    }
    Ok(())
}
