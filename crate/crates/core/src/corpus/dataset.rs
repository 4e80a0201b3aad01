use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, PAD, UNK};
use crate::error::{AfaError, Result};

/// One tokenized input with its class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<TokenId>,
    pub label: usize,
    /// Ground-truth decisive positions (synthetic data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_positions: Option<Vec<usize>>,
}

impl Example {
    pub fn new(token_ids: Vec<TokenId>, label: usize) -> Self {
        Example {
            token_ids,
            label,
            signal_positions: None,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Right-padded mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub token_ids: Vec<Vec<TokenId>>,
    pub labels: Vec<usize>,
    /// `true` at live (non-PAD) positions.
    pub pad_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_examples<'a, I>(examples: I) -> Result<Batch>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for ex in examples {
            seqs.push(ex.token_ids.clone());
            labels.push(ex.label);
        }
        Batch::from_sequences(seqs, labels)
    }

    /// Pads every sequence to the longest one. Sequences must be non-empty and PAD-free.
    pub fn from_sequences(seqs: Vec<Vec<TokenId>>, labels: Vec<usize>) -> Result<Batch> {
        if seqs.is_empty() {
            return Err(AfaError::Input("empty batch".into()));
        }
        if seqs.len() != labels.len() {
            return Err(AfaError::contract(format!(
                "{} sequences but {} labels",
                seqs.len(),
                labels.len()
            )));
        }
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(AfaError::Input(format!("sequence {i} is empty")));
            }
            if s.contains(&PAD) {
                return Err(AfaError::contract(format!(
                    "sequence {i} contains PAD inside its live span"
                )));
            }
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let pad_mask = seqs.iter().map(|s| (0..width).map(|j| j < s.len()).collect()).collect();
        let token_ids = seqs
            .into_iter()
            .map(|mut s| {
                s.resize(width, PAD);
                s
            })
            .collect();
        Ok(Batch {
            token_ids,
            labels,
            pad_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    pub fn live_len(&self, row: usize) -> usize {
        self.pad_mask[row].iter().filter(|&&m| m).count()
    }

    pub fn live_ids(&self, row: usize) -> &[TokenId] {
        &self.token_ids[row][..self.live_len(row)]
    }

    pub fn max_id(&self) -> TokenId {
        self.token_ids.iter().flatten().copied().max().unwrap_or(PAD)
    }
}

#[derive(Deserialize)]
struct Record {
    text: String,
    label: i64,
}

/// Reads `{"text": ..., "label": ...}` lines without tokenizing.
pub fn read_jsonl_records(path: &Path) -> Result<Vec<(String, i64)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| AfaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((rec.text, rec.label));
    }
    Ok(out)
}

/// Tokenizes a JSON-lines dataset, truncating to `max_len`.
///
/// Texts that tokenize to nothing become a single UNK so every example has a
/// live token.
pub fn load_jsonl(path: &Path, vocab: &Vocab, max_len: usize, num_classes: usize) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| AfaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.label < 0 || rec.label as usize >= num_classes {
            return Err(AfaError::LabelRange {
                path: path.to_path_buf(),
                line: i + 1,
                label: rec.label,
                classes: num_classes,
            });
        }
        let mut ids = vocab.encode(&rec.text);
        ids.truncate(max_len);
        if ids.is_empty() {
            ids.push(UNK);
        }
        out.push(Example::new(ids, rec.label as usize));
    }
    Ok(out)
}

/// Writes examples back out as JSON lines, detokenized through `vocab`.
pub fn write_jsonl(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for ex in examples {
        let text = vocab.decode(&ex.token_ids).join(" ");
        let line = serde_json::json!({ "text": text, "label": ex.label });
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// One epoch of batches over a shuffled view of `data`; the final batch may be short.
pub fn epoch_batches<R: Rng>(data: &[Example], batch_size: usize, rng: &mut R) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(AfaError::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_examples(chunk.iter().map(|&i| &data[i])))
        .collect()
}

/// Batches for a single epoch shuffled with `shuffle_seed`.
pub fn batch_iter(data: &[Example], batch_size: usize, shuffle_seed: u64) -> Result<impl Iterator<Item = Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    Ok(epoch_batches(data, batch_size, &mut rng)?.into_iter())
}
