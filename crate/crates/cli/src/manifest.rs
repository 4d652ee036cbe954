//! Run manifests: flat `key = value` configs resolved against defaults, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use coda::augment::StrategySpec;
use coda::diagnostics::{Estimator, KernelSpec, DEFAULT_SCALES};
use coda::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ARTIFACT_VERSION: &str = concat!("coda ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Eval,
    Augment,
    Mmd,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Augment => "augment",
            Command::Mmd => "mmd",
            Command::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bad or missing user input. The binary maps it to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub paraphrases: Option<PathBuf>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            fractions: vec![0.1],
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdPlan {
    pub strategies: Vec<String>,
    pub sample_size: usize,
    pub scales: Vec<f64>,
    pub estimator: Estimator,
}

impl Default for MmdPlan {
    fn default() -> Self {
        Self {
            strategies: ["ori", "cutoff", "back", "adv", "stack(back,adv)"]
                .map(String::from)
                .to_vec(),
            sample_size: 500,
            scales: DEFAULT_SCALES.to_vec(),
            estimator: Estimator::Biased,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPlan {
    /// Number of training examples to transform; 0 means all.
    pub limit: usize,
}

/// Everything a run needs, with no implicit defaults left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub command: Command,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    /// Model used by `eval`, and optionally by `augment` and `mmd`.
    pub checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
    pub sweep: SweepPlan,
    pub mmd: MmdPlan,
    pub augment: AugmentPlan,
    /// Store the memory bank in training checkpoints.
    pub checkpoint_bank: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: RunManifest =
            serde_json::from_str(&raw).map_err(|e| usage(format!("{}: malformed manifest: {e}", path.display())))?;
        if m.version != ARTIFACT_VERSION {
            log::warn!("manifest written by {:?}, running {ARTIFACT_VERSION:?}", m.version);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.config.seed != self.seed {
            return Err(usage(format!(
                "manifest seed {} disagrees with config seed {}",
                self.seed, self.config.seed
            )));
        }
        if self.data.num_classes < 2 {
            return Err(usage("num_classes must be at least 2"));
        }
        self.config.validate().map_err(|e| usage(e.to_string()))?;
        match self.command {
            Command::Eval if self.checkpoint.is_none() => {
                return Err(usage("eval needs a `checkpoint` key"));
            }
            Command::Sweep => {
                if self.data.dev.is_none() {
                    return Err(usage("sweep needs a `dev_path` key"));
                }
                if self.sweep.fractions.is_empty() || self.sweep.seeds.is_empty() || self.sweep.methods.is_empty() {
                    return Err(usage("sweep needs at least one fraction, seed and method"));
                }
                if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                    return Err(usage(format!("sweep fraction {f} outside (0, 1]")));
                }
            }
            Command::Mmd => {
                if self.mmd.strategies.is_empty() {
                    return Err(usage("mmd needs at least one strategy"));
                }
                for s in &self.mmd.strategies {
                    StrategySpec::parse(s, self.config.augment_settings()).map_err(|e| usage(e.to_string()))?;
                }
                KernelSpec::rbf(self.mmd.scales.clone()).map_err(|e| usage(format!("mmd_scales: {e}")))?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Command-line inputs to [`parse_config`].
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub command: Option<Command>,
    pub config: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force_weights: bool,
    /// `key=value` pairs applied after the config file.
    pub sets: Vec<String>,
}

/// Partially resolved manifest.
#[derive(Debug, Clone)]
struct Builder {
    command: Option<Command>,
    seed: u64,
    out_dir: Option<PathBuf>,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    paraphrases: Option<PathBuf>,
    num_classes: usize,
    checkpoint: Option<PathBuf>,
    config: TrainConfig,
    sweep: SweepPlan,
    mmd: MmdPlan,
    augment: AugmentPlan,
    checkpoint_bank: bool,
}

impl Default for Builder {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            out_dir: None,
            train: None,
            dev: None,
            paraphrases: None,
            num_classes: 2,
            checkpoint: None,
            config: TrainConfig::default(),
            sweep: SweepPlan::default(),
            mmd: MmdPlan::default(),
            augment: AugmentPlan::default(),
            checkpoint_bank: false,
        }
    }
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    let p = if p.is_absolute() { p } else { base.join(p) };
    std::path::absolute(&p).unwrap_or(p)
}

fn optional_path(base: &Path, raw: &str) -> Option<PathBuf> {
    match raw {
        "" | "none" => None,
        s => Some(resolve(base, s)),
    }
}

fn list<T: std::str::FromStr>(key: &str, raw: &str, sep: char) -> anyhow::Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    raw.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| usage(format!("{key}: {s:?}: {e}"))))
        .collect()
}

fn scalar<T: std::str::FromStr>(key: &str, raw: &str) -> anyhow::Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse().map_err(|e| usage(format!("{key}: {raw:?}: {e}")))
}

impl Builder {
    fn from_manifest(m: RunManifest) -> Self {
        Self {
            command: Some(m.command),
            seed: m.seed,
            out_dir: Some(m.out_dir),
            train: Some(m.data.train),
            dev: m.data.dev,
            paraphrases: m.data.paraphrases,
            num_classes: m.data.num_classes,
            checkpoint: m.checkpoint,
            config: m.config,
            sweep: m.sweep,
            mmd: m.mmd,
            augment: m.augment,
            checkpoint_bank: m.checkpoint_bank,
        }
    }

    /// Applies one key. Relative paths are resolved against `base`.
    fn set(&mut self, key: &str, raw: &str, base: &Path) -> anyhow::Result<()> {
        match key {
            "command" => {
                self.command = Some(Command::from_str(raw, true).map_err(|_| usage(format!("unknown command {raw:?}")))?)
            }
            "seed" => self.seed = scalar(key, raw)?,
            "out_dir" => self.out_dir = Some(resolve(base, raw)),
            "train_path" => self.train = Some(resolve(base, raw)),
            "dev_path" => self.dev = optional_path(base, raw),
            "paraphrase_path" => self.paraphrases = optional_path(base, raw),
            "num_classes" => self.num_classes = scalar(key, raw)?,
            "checkpoint" => self.checkpoint = optional_path(base, raw),
            "sweep_fractions" => self.sweep.fractions = list(key, raw, ',')?,
            "sweep_seeds" => self.sweep.seeds = list(key, raw, ',')?,
            "sweep_methods" => self.sweep.methods = list(key, raw, ',')?,
            // strategy names contain commas
            "mmd_strategies" => self.mmd.strategies = list(key, raw, ';')?,
            "mmd_sample_size" => self.mmd.sample_size = scalar(key, raw)?,
            "mmd_scales" => self.mmd.scales = list(key, raw, ',')?,
            "mmd_estimator" => {
                self.mmd.estimator = serde_json::from_value(Value::String(raw.to_string()))
                    .map_err(|_| usage(format!("mmd_estimator: expected `biased` or `unbiased`, got {raw:?}")))?
            }
            "augment_limit" => self.augment.limit = scalar(key, raw)?,
            "checkpoint_bank" => self.checkpoint_bank = scalar(key, raw)?,
            "init_from" => self.config.init_from = optional_path(base, raw).map(|p| p.display().to_string()),
            _ => set_train_key(&mut self.config, key, raw)?,
        }
        Ok(())
    }

    fn load_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let raw = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (i, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
            self.set(k.trim(), v.trim(), base)
                .map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    fn finish(self) -> anyhow::Result<RunManifest> {
        let command = self
            .command
            .ok_or_else(|| usage("no command given (pass one or set `command` in the config)"))?;
        let train = self
            .train
            .ok_or_else(|| usage("no dataset given (set `train_path`)"))?;
        let out_dir = self
            .out_dir
            .unwrap_or_else(|| resolve(Path::new("."), &format!("runs/{command}")));
        let mut config = self.config;
        config.seed = self.seed;
        let m = RunManifest {
            version: ARTIFACT_VERSION.to_string(),
            command,
            seed: self.seed,
            out_dir,
            data: DataPaths {
                train,
                dev: self.dev,
                paraphrases: self.paraphrases,
                num_classes: self.num_classes,
            },
            checkpoint: self.checkpoint,
            config,
            sweep: self.sweep,
            mmd: self.mmd,
            augment: self.augment,
            checkpoint_bank: self.checkpoint_bank,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Sets a [`TrainConfig`] field by name, parsing `raw` according to the field's current type.
fn set_train_key(config: &mut TrainConfig, key: &str, raw: &str) -> anyhow::Result<()> {
    let mut obj = serde_json::to_value(&*config)?;
    let map = obj.as_object_mut().expect("config serializes to an object");
    let slot = map.get(key).ok_or_else(|| usage(format!("unknown config key {key:?}")))?;
    let value = match slot {
        Value::Number(_) => serde_json::from_str::<Value>(raw)
            .ok()
            .filter(Value::is_number)
            .ok_or_else(|| usage(format!("{key} expects a number, got {raw:?}")))?,
        Value::Bool(_) => Value::Bool(scalar(key, raw)?),
        _ => Value::String(raw.to_string()),
    };
    map.insert(key.to_string(), value);
    *config = serde_json::from_value(obj).map_err(|e| usage(format!("{key}: {e}")))?;
    Ok(())
}

/// Resolves a manifest: defaults, then `--manifest`, then `--config`, then `--set`, then the
/// dedicated flags.
pub fn parse_config(flags: &Overrides) -> anyhow::Result<RunManifest> {
    let mut b = match &flags.manifest {
        Some(path) => Builder::from_manifest(RunManifest::load(path)?),
        None => Builder::default(),
    };
    if let Some(path) = &flags.config {
        b.load_file(path)?;
    }
    let cwd = Path::new(".");
    for kv in &flags.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        b.set(k.trim(), v.trim(), cwd)?;
    }
    if let Some(c) = flags.command {
        b.command = Some(c);
    }
    if let Some(s) = flags.seed {
        b.seed = s;
    }
    if let Some(o) = &flags.out {
        b.out_dir = Some(resolve(cwd, &o.display().to_string()));
    }
    if flags.force_weights {
        b.config.force_weights = true;
    }
    b.finish()
}
