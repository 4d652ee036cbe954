//! Dataset ingestion, vocabulary, paraphrase tables and low-resource subsampling.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};
use crate::rng::{derive_rng, stream};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const NUM_RESERVED: usize = 3;
const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<mask>"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    unigram_freq: Vec<u64>,
}

impl Vocabulary {
    /// A vocabulary holding only the reserved ids.
    pub fn reserved_only() -> Self {
        let mut v = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            unigram_freq: Vec::new(),
        };
        for t in RESERVED_TOKENS {
            v.push(t.to_string(), 0);
        }
        v
    }

    /// Rebuilds a vocabulary from an ordered token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<(String, u64)>) -> Result<Self> {
        let mut v = Self::reserved_only();
        for (i, (t, f)) in tokens.into_iter().enumerate() {
            if i < NUM_RESERVED {
                if t != RESERVED_TOKENS[i] {
                    return Err(CodaError::Config(format!(
                        "reserved token {i} is {t:?}, expected {:?}",
                        RESERVED_TOKENS[i]
                    )));
                }
                continue;
            }
            if v.token_to_id.contains_key(&t) {
                return Err(CodaError::Config(format!("duplicate vocabulary token {t:?}")));
            }
            v.push(t, f.max(1));
        }
        Ok(v)
    }

    fn push(&mut self, token: String, freq: u64) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.unigram_freq.push(freq);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn freq(&self, id: u32) -> u64 {
        self.unigram_freq.get(id as usize).copied().unwrap_or(0)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Non-reserved `(id, count)` pairs in id order.
    pub fn unigram(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.unigram_freq
            .iter()
            .enumerate()
            .skip(NUM_RESERVED)
            .map(|(i, &f)| (i as u32, f))
    }

    /// Ordered `(token, count)` list, suitable for [`Vocabulary::from_tokens`].
    pub fn entries(&self) -> Vec<(String, u64)> {
        self.id_to_token
            .iter()
            .cloned()
            .zip(self.unigram_freq.iter().copied())
            .collect()
    }
}

fn split_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_text: String,
}

impl TokenSequence {
    /// Count of non-pad ids.
    pub fn len(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn untokenized(text: impl Into<String>) -> Self {
        Self {
            ids: Vec::new(),
            source_text: text.into(),
        }
    }

    /// Space-joined surface form of the ids.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.ids
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    TokenSequence {
        ids: split_tokens(text)
            .map(|t| vocab.id(&t).unwrap_or(UNK))
            .collect(),
        source_text: text.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: TokenSequence,
    pub label: Vec<f64>,
}

impl LabeledExample {
    pub fn one_hot(text: impl Into<String>, class: usize, num_classes: usize) -> Self {
        let mut label = vec![0.0; num_classes];
        label[class] = 1.0;
        Self {
            tokens: TokenSequence::untokenized(text),
            label,
        }
    }

    pub fn text(&self) -> &str {
        &self.tokens.source_text
    }

    /// Index of the largest label entry (first on ties).
    pub fn class(&self) -> usize {
        argmax(&self.label)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(CodaError::Config("num_classes must be positive".into()));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.label.len() != num_classes {
                return Err(CodaError::Shape(format!(
                    "example {i} has a label of dimension {}, expected {num_classes}",
                    ex.label.len()
                )));
            }
        }
        Ok(Self {
            examples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Returns a copy whose examples carry ids from `vocab`.
    pub fn tokenized(&self, vocab: &Vocabulary) -> Self {
        Self {
            examples: self
                .examples
                .iter()
                .map(|ex| LabeledExample {
                    tokens: tokenize(&ex.tokens.source_text, vocab),
                    label: ex.label.clone(),
                })
                .collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Tsv,
    Jsonl,
}

impl DatasetFormat {
    /// Guesses the format from the file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DatasetFormat::Jsonl,
            _ => DatasetFormat::Tsv,
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    label: i64,
}

pub fn load_dataset(path: &Path, format: DatasetFormat, num_classes: usize) -> Result<LabeledDataset> {
    let raw = fs::read_to_string(path).map_err(|e| CodaError::io(path, e))?;
    let parse_err = |line: usize, message: String| CodaError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut examples = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = match format {
            DatasetFormat::Tsv => {
                let (text, label) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| parse_err(lineno, "expected `text<TAB>label`".into()))?;
                let label: i64 = label
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("label {label:?} is not an integer")))?;
                (text.to_string(), label)
            }
            DatasetFormat::Jsonl => {
                let rec: JsonRecord = serde_json::from_str(line)
                    .map_err(|e| parse_err(lineno, format!("malformed record: {e}")))?;
                (rec.text, rec.label)
            }
        };
        if label < 0 || label as usize >= num_classes {
            return Err(parse_err(
                lineno,
                format!("class {label} out of range [0, {num_classes})"),
            ));
        }
        examples.push(LabeledExample::one_hot(text, label as usize, num_classes));
    }
    LabeledDataset::new(examples, num_classes)
}

/// Builds a vocabulary from raw texts: descending frequency, lexicographic tie-break.
pub fn build_vocab_from_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_freq: u64,
    max_size: usize,
) -> Vocabulary {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for tok in split_tokens(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size.saturating_sub(NUM_RESERVED));

    let mut vocab = Vocabulary::reserved_only();
    for (t, c) in ranked {
        vocab.push(t, c);
    }
    vocab
}

pub fn build_vocab(dataset: &LabeledDataset, min_freq: u64, max_size: usize) -> Vocabulary {
    build_vocab_from_texts(dataset.examples.iter().map(|e| e.text()), min_freq, max_size)
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize_text(text: &str) -> String {
    split_tokens(text).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Default)]
pub struct ParaphraseTable {
    entries: HashMap<String, String>,
    hits: AtomicU64,
    misses: AtomicU64,
    duplicates: usize,
}

impl ParaphraseTable {
    pub fn from_pairs<S: AsRef<str>>(pairs: impl IntoIterator<Item = (S, S)>) -> Self {
        let mut table = Self::default();
        for (src, para) in pairs {
            table.insert(src.as_ref(), para.as_ref());
        }
        table
    }

    fn insert(&mut self, source: &str, paraphrase: &str) -> bool {
        let replaced = self
            .entries
            .insert(normalize_text(source), paraphrase.trim().to_string())
            .is_some();
        if replaced {
            self.duplicates += 1;
        }
        replaced
    }

    /// Looks up a paraphrase and updates the hit/miss counters.
    pub fn lookup(&self, text: &str) -> Option<&str> {
        match self.entries.get(&normalize_text(text)) {
            Some(p) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(p.as_str())
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn paraphrases(&self) -> impl Iterator<Item = &str> {
        self.entries.values().map(String::as_str)
    }
}

pub fn load_paraphrases(path: &Path) -> Result<ParaphraseTable> {
    let raw = fs::read_to_string(path).map_err(|e| CodaError::io(path, e))?;
    let mut table = ParaphraseTable::default();
    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| CodaError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: message.to_string(),
        };
        let (src, para) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `source<TAB>paraphrase`"))?;
        if para.trim().is_empty() {
            return Err(err("empty paraphrase"));
        }
        if table.insert(src, para) {
            log::warn!(
                "{}:{lineno}: duplicate paraphrase source {:?}; last entry wins",
                path.display(),
                normalize_text(src)
            );
        }
    }
    Ok(table)
}

/// Class-stratified subsample keeping `ceil(fraction * class_count)` examples per class.
/// Retained examples keep their original relative order.
pub fn subsample(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CodaError::Config(format!(
            "subsample fraction {fraction} outside (0, 1]"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, ex) in dataset.examples.iter().enumerate() {
        by_class[ex.class()].push(i);
    }
    let mut keep = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        let take = (fraction * idx.len() as f64).ceil() as usize;
        let take = take.min(idx.len());
        if take < idx.len() {
            let mut rng = derive_rng(seed, &[stream::SUBSAMPLE, class as u64]);
            idx.shuffle(&mut rng);
        }
        keep.extend_from_slice(&idx[..take]);
    }
    keep.sort_unstable();
    Ok(LabeledDataset {
        examples: keep.into_iter().map(|i| dataset.examples[i].clone()).collect(),
        num_classes: dataset.num_classes,
    })
}
