//! Executes a resolved [`RunManifest`].

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use coda::augment::{apply_strategy, AugmentContext, CrossEntropyOracle, StrategySpec, UnigramSampler};
use coda::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use coda::corpus::{
    build_vocab_from_texts, load_dataset, load_paraphrases, DatasetFormat, LabeledDataset, ParaphraseTable, Vocabulary,
};
use coda::diagnostics::{diversity_report, DiversityRow, DiversitySettings};
use coda::encoder::{init_params, ModelParams};
use coda::objectives::LossBreakdown;
use coda::rng::{derive_rng, stream};
use coda::trainer::{
    evaluate, fit, low_resource_sweep, model_dims, Method, MetricsRecord, Resources, SweepRow, TrainConfig,
    TrainObserver, TrainState,
};
use coda::CodaError;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::manifest::{Command, RunManifest};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

struct Inputs {
    train: LabeledDataset,
    dev: Option<LabeledDataset>,
    table: ParaphraseTable,
}

impl Inputs {
    fn load(m: &RunManifest) -> anyhow::Result<Self> {
        let k = m.data.num_classes;
        let read = |p: &Path| load_dataset(p, DatasetFormat::from_path(p), k);
        let train = read(&m.data.train)?;
        let dev = m.data.dev.as_deref().map(read).transpose()?;
        let table = match &m.data.paraphrases {
            Some(p) => load_paraphrases(p)?,
            None => ParaphraseTable::default(),
        };
        log::info!(
            "loaded {} training examples, {} dev examples, {} paraphrases",
            train.len(),
            dev.as_ref().map_or(0, LabeledDataset::len),
            table.len()
        );
        Ok(Self { train, dev, table })
    }

    /// Vocabulary over training texts and their paraphrases.
    fn vocab(&self, config: &TrainConfig) -> Vocabulary {
        let texts = self
            .train
            .examples
            .iter()
            .map(|e| e.text())
            .chain(self.table.paraphrases());
        build_vocab_from_texts(texts, config.min_freq, config.max_vocab)
    }
}

fn load_model(path: &Path, num_classes: usize) -> anyhow::Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.num_classes != num_classes {
        bail!(
            "checkpoint {} has {} classes, run expects {num_classes}",
            path.display(),
            ckpt.num_classes
        );
    }
    Ok(ckpt)
}

/// Model for `augment` and `mmd`: the configured checkpoint, or a fresh seeded initialization.
fn model_source(m: &RunManifest, inputs: &Inputs) -> anyhow::Result<(Vocabulary, ModelParams)> {
    match &m.checkpoint {
        Some(path) => {
            let ckpt = load_model(path, m.data.num_classes)?;
            Ok((ckpt.vocab, ckpt.params))
        }
        None => {
            let vocab = inputs.vocab(&m.config);
            let params = init_params(model_dims(&m.config, vocab.len(), m.data.num_classes), m.seed)?;
            Ok((vocab, params))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

/// Line-buffered JSONL writer that flushes after every record.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> anyhow::Result<Self> {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    fn push(&mut self, value: &impl Serialize) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

struct RunObserver<'a> {
    metrics: JsonLines,
    ckpt_dir: PathBuf,
    config: &'a TrainConfig,
    vocab: &'a Vocabulary,
    num_classes: usize,
    with_bank: bool,
    checkpoints: Vec<String>,
}

impl RunObserver<'_> {
    fn snapshot(&self, state: &TrainState) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            num_classes: self.num_classes,
            step: state.step,
            params: state.params.clone(),
            key_params: Some(state.key.key_params.clone()),
            bank: self.with_bank.then(|| state.bank.clone()),
        }
    }
}

impl TrainObserver for RunObserver<'_> {
    fn on_record(&mut self, record: &MetricsRecord) -> coda::Result<()> {
        self.metrics.push(record).map_err(|source| CodaError::Io {
            path: self.metrics.path.clone(),
            source,
        })
    }

    fn on_checkpoint(&mut self, state: &TrainState, label: &str) -> coda::Result<()> {
        let path = self.ckpt_dir.join(format!("{label}.ckpt"));
        save_checkpoint(&path, &self.snapshot(state))?;
        self.checkpoints.push(path.display().to_string());
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct TrainReport {
    command: Command,
    steps: u64,
    train_size: usize,
    dev_size: usize,
    vocab_size: usize,
    best_dev_accuracy: Option<f64>,
    best_dev: Option<MetricsRecord>,
    final_dev: Option<MetricsRecord>,
    final_loss: LossBreakdown,
    paraphrase_hits: u64,
    paraphrase_misses: u64,
    checkpoints: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn run_train(m: &RunManifest) -> anyhow::Result<()> {
    let inputs = Inputs::load(m)?;
    let (vocab, initial) = match &m.config.init_from {
        Some(path) => {
            let ckpt = load_model(Path::new(path), m.data.num_classes)?;
            log::info!("initializing from {path} (step {})", ckpt.step);
            (ckpt.vocab, Some(ckpt.params))
        }
        None => (inputs.vocab(&m.config), None),
    };
    let sampler = UnigramSampler::new(&vocab);
    let res = Resources {
        vocab: &vocab,
        table: &inputs.table,
        sampler: &sampler,
    };
    let train = inputs.train.tokenized(&vocab);
    let dev = inputs.dev.as_ref().map(|d| d.tokenized(&vocab));
    let ckpt_dir = m.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut observer = RunObserver {
        metrics: JsonLines::create(m.out_dir.join(METRICS_FILE))?,
        ckpt_dir,
        config: &m.config,
        vocab: &vocab,
        num_classes: m.data.num_classes,
        with_bank: m.checkpoint_bank,
        checkpoints: Vec::new(),
    };
    let result = fit(&train, dev.as_ref(), &m.config, res, initial, &mut observer);
    let mut report = TrainReport {
        command: m.command,
        steps: 0,
        train_size: train.len(),
        dev_size: dev.as_ref().map_or(0, LabeledDataset::len),
        vocab_size: vocab.len(),
        best_dev_accuracy: None,
        best_dev: None,
        final_dev: None,
        final_loss: LossBreakdown::default(),
        paraphrase_hits: inputs.table.hits(),
        paraphrase_misses: inputs.table.misses(),
        checkpoints: Vec::new(),
        error: None,
    };
    match result {
        Ok(outcome) => {
            observer.on_checkpoint(&outcome.state, "final")?;
            report.steps = outcome.state.step;
            report.best_dev_accuracy = outcome.best_dev.as_ref().map(|r| r.accuracy);
            report.best_dev = outcome.best_dev;
            report.final_dev = outcome.final_dev;
            report.final_loss = outcome.final_loss;
            report.checkpoints = observer.checkpoints;
            write_json(&m.out_dir.join(REPORT_FILE), &report)?;
            log::info!(
                "trained {} steps; best dev accuracy {:?}",
                report.steps,
                report.best_dev_accuracy
            );
            Ok(())
        }
        Err(e) => {
            report.checkpoints = observer.checkpoints;
            report.error = Some(e.to_string());
            write_json(&m.out_dir.join(REPORT_FILE), &report)?;
            Err(e.into())
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    step: u64,
    splits: Vec<MetricsRecord>,
}

fn run_eval(m: &RunManifest) -> anyhow::Result<()> {
    let path = m.checkpoint.as_ref().expect("validated");
    let ckpt = load_model(path, m.data.num_classes)?;
    let inputs = Inputs::load(m)?;
    let mut metrics = JsonLines::create(m.out_dir.join(METRICS_FILE))?;
    let mut splits = Vec::new();
    let sets = [("train", Some(&inputs.train)), ("dev", inputs.dev.as_ref())];
    for (name, data) in sets {
        let Some(data) = data else { continue };
        let mut record = evaluate(&ckpt.params, &data.tokenized(&ckpt.vocab), name)?;
        record.step = ckpt.step;
        metrics.push(&record)?;
        log::info!("{name}: accuracy {:.4}, ce {:.4}", record.accuracy, record.loss.ce);
        splits.push(record);
    }
    write_json(
        &m.out_dir.join(REPORT_FILE),
        &EvalReport {
            checkpoint: path.clone(),
            step: ckpt.step,
            splits,
        },
    )
}

#[derive(Debug, Serialize)]
struct AugmentRecord {
    index: usize,
    original_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    augmented_text: Option<String>,
    /// SHA-256 of the little-endian f64 embedding values, for embedding-level outputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding_digest: Option<String>,
    provenance: Vec<String>,
    label: Vec<f64>,
}

fn digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize)]
struct AugmentReport {
    strategy: String,
    examples: usize,
    token_outputs: usize,
    embedding_outputs: usize,
    paraphrase_hits: u64,
    paraphrase_misses: u64,
}

fn run_augment(m: &RunManifest) -> anyhow::Result<()> {
    let inputs = Inputs::load(m)?;
    let (vocab, params) = model_source(m, &inputs)?;
    let spec = m.config.strategy_spec()?;
    let sampler = UnigramSampler::new(&vocab);
    let data = inputs.train.tokenized(&vocab);
    let limit = match m.augment.limit {
        0 => data.len(),
        n => n.min(data.len()),
    };
    let mut out = JsonLines::create(m.out_dir.join("augmented.jsonl"))?;
    let mut report = AugmentReport {
        strategy: spec.name(),
        examples: 0,
        token_outputs: 0,
        embedding_outputs: 0,
        paraphrase_hits: 0,
        paraphrase_misses: 0,
    };
    for (b, chunk) in data.examples[..limit].chunks(m.config.batch_size).enumerate() {
        let mut oracle = CrossEntropyOracle::eval(&params);
        let mut ctx = AugmentContext {
            vocab: &vocab,
            table: &inputs.table,
            sampler: &sampler,
            embed_table: &params.embed,
            oracle: &mut oracle,
        };
        let mut rng = derive_rng(m.seed, &[stream::AUGMENT, b as u64]);
        let pairs = apply_strategy(&spec, chunk, &mut ctx, &mut rng)?;
        for (i, pair) in pairs.into_iter().enumerate() {
            let record = AugmentRecord {
                index: b * m.config.batch_size + i,
                original_text: pair.original.text().to_string(),
                augmented_text: match &pair.augmented_embeddings {
                    None => pair.augmented_tokens.as_ref().map(|t| t.render(&vocab)),
                    Some(_) => None,
                },
                embedding_digest: pair.augmented_embeddings.as_ref().map(|e| digest(&e.values)),
                provenance: pair.provenance,
                label: pair.label,
            };
            if record.embedding_digest.is_some() {
                report.embedding_outputs += 1;
            } else {
                report.token_outputs += 1;
            }
            report.examples += 1;
            out.push(&record)?;
        }
    }
    report.paraphrase_hits = inputs.table.hits();
    report.paraphrase_misses = inputs.table.misses();
    write_json(&m.out_dir.join(REPORT_FILE), &report)
}

#[derive(Debug, Serialize)]
struct DiversityReport<'a> {
    model: String,
    settings: &'a DiversitySettings,
    rows: &'a [DiversityRow],
}

fn run_mmd(m: &RunManifest) -> anyhow::Result<()> {
    let inputs = Inputs::load(m)?;
    let (vocab, params) = model_source(m, &inputs)?;
    let sampler = UnigramSampler::new(&vocab);
    let res = Resources {
        vocab: &vocab,
        table: &inputs.table,
        sampler: &sampler,
    };
    let specs = m
        .mmd
        .strategies
        .iter()
        .map(|s| StrategySpec::parse(s, m.config.augment_settings()))
        .collect::<coda::Result<Vec<_>>>()?;
    let settings = DiversitySettings {
        sample_size: m.mmd.sample_size,
        seed: m.seed,
        scales: m.mmd.scales.clone(),
        estimator: m.mmd.estimator,
        batch_size: m.config.batch_size,
    };
    let rows = diversity_report(&inputs.train.tokenized(&vocab), &specs, &params, res, &settings)?;

    let mut tsv = String::from("strategy\tmmd\tsample_count\terror\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.strategy,
            r.mmd,
            r.sample_count,
            r.error.as_deref().unwrap_or("")
        ));
        log::info!("{:<24} {:.6}", r.strategy, r.mmd);
    }
    fs::write(m.out_dir.join("diversity.tsv"), tsv)?;
    let model = match &m.checkpoint {
        Some(p) => p.display().to_string(),
        None => format!("init(seed={})", m.seed),
    };
    write_json(
        &m.out_dir.join("diversity.json"),
        &DiversityReport {
            model,
            settings: &settings,
            rows: &rows,
        },
    )?;
    if let Some(r) = rows.iter().find(|r| r.error.is_some()) {
        bail!("strategy {} failed: {}", r.strategy, r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

/// Mean final dev accuracy of one (fraction, method) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub fraction: f64,
    pub method: Method,
    pub mean_accuracy: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(f64, Method)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.fraction, r.method)) {
            keys.push((r.fraction, r.method));
        }
    }
    keys.into_iter()
        .map(|(fraction, method)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.fraction == fraction && r.method == method)
                .collect();
            let accs: Vec<f64> = group.iter().filter_map(|r| r.accuracy).collect();
            SweepSummary {
                fraction,
                method,
                mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
                completed: accs.len(),
                failed: group.len() - accs.len(),
            }
        })
        .collect()
}

fn run_sweep(m: &RunManifest) -> anyhow::Result<()> {
    let inputs = Inputs::load(m)?;
    let vocab = inputs.vocab(&m.config);
    let sampler = UnigramSampler::new(&vocab);
    let res = Resources {
        vocab: &vocab,
        table: &inputs.table,
        sampler: &sampler,
    };
    let train = inputs.train.tokenized(&vocab);
    let dev = inputs.dev.as_ref().expect("validated").tokenized(&vocab);
    let rows = low_resource_sweep(
        &train,
        &dev,
        &m.sweep.fractions,
        &m.config,
        &m.sweep.seeds,
        &m.sweep.methods,
        res,
    )?;

    let mut jsonl = JsonLines::create(m.out_dir.join("sweep.jsonl"))?;
    let mut tsv = String::from("fraction\tseed\tmethod\ttrain_size\taccuracy\tbest_accuracy\terror\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in &rows {
        jsonl.push(r)?;
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.fraction,
            r.seed,
            r.method,
            r.train_size,
            opt(r.accuracy),
            opt(r.best_accuracy),
            r.error.as_deref().unwrap_or("")
        ));
    }
    fs::write(m.out_dir.join("sweep.tsv"), tsv)?;
    let summary = summarize(&rows);
    for s in &summary {
        log::info!("fraction {} {:<14} mean accuracy {:?}", s.fraction, s.method, s.mean_accuracy);
    }
    write_json(&m.out_dir.join(REPORT_FILE), &summary)?;
    let failed: usize = summary.iter().map(|s| s.failed).sum();
    if failed > 0 {
        bail!("{failed} sweep cell(s) failed; see sweep.tsv");
    }
    Ok(())
}

/// Writes the manifest into the output directory, then dispatches on the command.
pub fn run(m: &RunManifest) -> anyhow::Result<()> {
    m.validate()?;
    fs::create_dir_all(&m.out_dir).with_context(|| format!("creating {}", m.out_dir.display()))?;
    fs::write(m.out_dir.join(MANIFEST_FILE), m.to_json())?;
    log::info!("{} -> {}", m.command, m.out_dir.display());
    match m.command {
        Command::Train => run_train(m),
        Command::Eval => run_eval(m),
        Command::Augment => run_augment(m),
        Command::Mmd => run_mmd(m),
        Command::Sweep => run_sweep(m),
    }
}
