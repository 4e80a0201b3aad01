//! Tokenization, datasets, batching and the planted-signal generator.

mod dataset;
mod embeddings;
mod planted;
mod vocab;

pub use dataset::{batch_iter, epoch_batches, load_jsonl, read_jsonl_records, write_jsonl, Batch, Example};
pub use embeddings::load_embeddings;
pub use planted::{gen_planted, PlantedDataset, PlantedSpec};
pub use vocab::{tokenize, TokenId, Vocab, MASK, PAD, UNK};
