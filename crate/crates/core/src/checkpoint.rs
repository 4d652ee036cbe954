//! Binary checkpoints: a JSON header followed by raw little-endian `f64` tensors.
//!
//! Layout: `CODACKPT`, header length (`u64` LE), header JSON, then the values of
//! every tensor listed in the header, in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrast::MemoryBank;
use crate::corpus::Vocabulary;
use crate::encoder::{ModelParams, TENSOR_NAMES};
use crate::error::{CodaError, Result};
use crate::tensor::Matrix;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"CODACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub num_classes: usize,
    pub step: u64,
    pub params: ModelParams,
    pub key_params: Option<ModelParams>,
    pub bank: Option<MemoryBank>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    vocab: Vec<(String, u64)>,
    num_classes: usize,
    step: u64,
    tensors: Vec<TensorEntry>,
    has_key_params: bool,
    bank: Option<MemoryBank>,
}

fn entries(prefix: &str, p: &ModelParams) -> Vec<TensorEntry> {
    p.tensors()
        .iter()
        .map(|(n, t)| TensorEntry {
            name: format!("{prefix}{n}"),
            rows: t.rows,
            cols: t.cols,
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = entries("", &ckpt.params);
    if let Some(k) = &ckpt.key_params {
        tensors.extend(entries("key.", k));
    }
    let header = Header {
        version: VERSION,
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.entries(),
        num_classes: ckpt.num_classes,
        step: ckpt.step,
        tensors,
        has_key_params: ckpt.key_params.is_some(),
        bank: ckpt.bank.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CodaError::Checkpoint(e.to_string()))?;
    let file = File::create(path).map_err(|e| CodaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| CodaError::io(path, e));
    write(MAGIC)?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for p in std::iter::once(&ckpt.params).chain(ckpt.key_params.as_ref()) {
        for (_, t) in p.tensors() {
            for v in &t.data {
                write(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| CodaError::io(path, e))
}

fn read_params(r: &mut impl Read, entries: &[TensorEntry], prefix: &str, path: &Path) -> Result<ModelParams> {
    let mut out = Vec::with_capacity(TENSOR_NAMES.len());
    for (entry, expected) in entries.iter().zip(TENSOR_NAMES) {
        if entry.name != format!("{prefix}{expected}") {
            return Err(CodaError::Checkpoint(format!(
                "expected tensor {prefix}{expected}, found {}",
                entry.name
            )));
        }
        let mut data = vec![0.0; entry.rows * entry.cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| CodaError::io(path, e))?;
            *v = f64::from_le_bytes(buf);
        }
        out.push(Matrix::from_vec(entry.rows, entry.cols, data)?);
    }
    let mut it = out.into_iter();
    let mut next = || it.next().expect("nine tensors");
    Ok(ModelParams {
        embed: next(),
        enc_w1: next(),
        enc_b1: next(),
        enc_w2: next(),
        enc_b2: next(),
        cls_w: next(),
        cls_b: next(),
        proj_w: next(),
        proj_b: next(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| CodaError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| CodaError::io(path, e))?;
    if &magic != MAGIC {
        return Err(CodaError::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| CodaError::io(path, e))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|e| CodaError::io(path, e))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| CodaError::Checkpoint(e.to_string()))?;
    if header.version != VERSION {
        return Err(CodaError::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
    }
    let n = TENSOR_NAMES.len();
    let expected = if header.has_key_params { 2 * n } else { n };
    if header.tensors.len() != expected {
        return Err(CodaError::Checkpoint(format!(
            "header lists {} tensors, expected {expected}",
            header.tensors.len()
        )));
    }
    let params = read_params(&mut r, &header.tensors[..n], "", path)?;
    let key_params = if header.has_key_params {
        Some(read_params(&mut r, &header.tensors[n..], "key.", path)?)
    } else {
        None
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| CodaError::io(path, e))?;
    if !rest.is_empty() {
        return Err(CodaError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        config: header.config,
        vocab: Vocabulary::from_tokens(header.vocab)?,
        num_classes: header.num_classes,
        step: header.step,
        params,
        key_params,
        bank: header.bank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab_from_texts;
    use crate::encoder::{init_params, ModelDims};

    #[test]
    fn round_trip_is_exact() {
        let vocab = build_vocab_from_texts(["a b c a"], 1, 10);
        let dims = ModelDims {
            vocab_size: vocab.len(),
            d_emb: 3,
            d_hid: 4,
            d_proj: 2,
            num_classes: 2,
        };
        let mut params = init_params(dims, 9).unwrap();
        params.enc_b1.data[0] = 0.1 + 0.2;
        let mut bank = MemoryBank::new(3, 2).unwrap();
        bank.push_one(&[0.6, 0.8]).unwrap();
        let ckpt = Checkpoint {
            config: TrainConfig::default(),
            vocab,
            num_classes: 2,
            step: 12,
            key_params: Some(init_params(dims, 10).unwrap()),
            params,
            bank: Some(bank),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        let plain = Checkpoint {
            key_params: None,
            bank: None,
            ..ckpt
        };
        save_checkpoint(&path, &plain).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), plain);

        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
