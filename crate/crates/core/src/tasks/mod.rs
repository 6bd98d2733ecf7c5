//! Dataset construction and batching for the two tasks.

pub mod dyck;
pub mod scan;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use dyck::{generate_dyck, DyckConfig, DyckSequence, DyckSplit};
pub use scan::{load_scan, split_scan, ScanConfig, ScanExample, ScanSplit, ScanVocab};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("Dyck sequence length must be a positive even number, got {0}")]
    OddLength(usize),
    #[error("Dyck max depth {max_depth} is out of range for length {len}")]
    BadDepth { len: usize, max_depth: usize },
    #[error("only {available} distinct Dyck sequences exist, {requested} requested")]
    TooFewSequences { available: u128, requested: usize },
    #[error("SCAN file not found: {0}")]
    MissingFile(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed SCAN example {content:?}")]
    Malformed { line: usize, content: String },
    #[error("SCAN split needs more than {n_train} examples, file has {available}")]
    SplitTooLarge { n_train: usize, available: usize },
}

/// Decoder-only batch: one label per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub rows: usize,
    pub seq_len: usize,
    /// `[rows * seq_len]` token ids, padding included.
    pub tokens: Vec<usize>,
    /// `[rows * seq_len]`; `None` at padding positions.
    pub targets: Vec<Option<usize>>,
    /// `[rows * seq_len]`; `false` at padding positions.
    pub valid: Vec<bool>,
}

/// Encoder-decoder batch with teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqBatch {
    pub rows: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_valid: Vec<bool>,
    /// Decoder inputs: BOS followed by the shifted action tokens.
    pub tgt_in: Vec<usize>,
    pub tgt_valid: Vec<bool>,
    /// Decoder targets: the action tokens followed by EOS.
    pub tgt_out: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskBatch {
    Seq(SeqBatch),
    Seq2Seq(Seq2SeqBatch),
}

impl TaskBatch {
    pub fn rows(&self) -> usize {
        match self {
            TaskBatch::Seq(b) => b.rows,
            TaskBatch::Seq2Seq(b) => b.rows,
        }
    }
}

/// An immutable set of examples of either task.
#[derive(Clone, Debug)]
pub enum TaskDataset {
    Dyck(Arc<Vec<DyckSequence>>),
    Scan { examples: Arc<Vec<ScanExample>>, vocab: Arc<ScanVocab> },
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        match self {
            TaskDataset::Dyck(e) => e.len(),
            TaskDataset::Scan { examples, .. } => examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch made of the given example indices, padded to the longest member.
    pub fn batch(&self, indices: &[usize]) -> TaskBatch {
        match self {
            TaskDataset::Dyck(e) => TaskBatch::Seq(dyck::batch(indices.iter().map(|&i| &e[i]))),
            TaskDataset::Scan { examples, .. } => {
                TaskBatch::Seq2Seq(scan::batch(indices.iter().map(|&i| &examples[i])))
            }
        }
    }

    pub fn full_batch(&self) -> TaskBatch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Indices of one epoch in a seeded order.
    pub fn epoch_order(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    /// One epoch of batches; the final batch holds the remainder.
    pub fn make_batches(&self, batch_size: usize, seed: u64) -> Vec<TaskBatch> {
        assert!(batch_size >= 1, "batch size must be at least 1");
        self.epoch_order(seed).chunks(batch_size).map(|c| self.batch(c)).collect()
    }
}
