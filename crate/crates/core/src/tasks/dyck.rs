//! Dyck-1 depth prediction.
//!
//! Sequences are sampled uniformly from balanced strings of the configured
//! length by a left-to-right ballot construction: at each position the
//! open/close choice is drawn with probability proportional to the number
//! of valid completions, so no draw is ever rejected. The label at each
//! position is the nesting depth after consuming that position's token.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SeqBatch, TaskError};

pub const OPEN: usize = 0;
pub const CLOSE: usize = 1;
pub const PAD: usize = 2;
pub const VOCAB: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyckConfig {
    pub seq_len: usize,
    pub max_depth: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DyckConfig {
    fn default() -> Self {
        DyckConfig { seq_len: 24, max_depth: 12, n_train: 50, n_test: 5000, seed: 0 }
    }
}

impl DyckConfig {
    /// Number of depth classes, `0..=max_depth`.
    pub fn classes(&self) -> usize {
        self.max_depth + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DyckSequence {
    pub tokens: Vec<usize>,
    pub depths: Vec<usize>,
}

impl DyckSequence {
    pub fn from_tokens(tokens: Vec<usize>) -> Self {
        let mut d = 0usize;
        let depths = tokens
            .iter()
            .map(|&t| {
                if t == OPEN {
                    d += 1;
                } else {
                    d -= 1;
                }
                d
            })
            .collect();
        DyckSequence { tokens, depths }
    }

    /// `"(())" ` followed by comma-separated depth labels.
    pub fn to_line(&self) -> String {
        let parens: String = self.tokens.iter().map(|&t| if t == OPEN { '(' } else { ')' }).collect();
        let labels: Vec<String> = self.depths.iter().map(|d| d.to_string()).collect();
        format!("{parens} {}", labels.join(","))
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let (parens, labels) = line.trim().split_once(' ')?;
        let tokens: Vec<usize> = parens
            .chars()
            .map(|c| match c {
                '(' => Some(OPEN),
                ')' => Some(CLOSE),
                _ => None,
            })
            .collect::<Option<_>>()?;
        let depths: Vec<usize> = labels.split(',').map(|s| s.parse().ok()).collect::<Option<_>>()?;
        (tokens.len() == depths.len()).then_some(DyckSequence { tokens, depths })
    }
}

#[derive(Clone, Debug)]
pub struct DyckSplit {
    pub train: Vec<DyckSequence>,
    pub test: Vec<DyckSequence>,
}

/// `table[r][d]`: number of ways to emit `r` more tokens from depth `d`,
/// ending at depth 0 without leaving `0..=max_depth`.
fn completion_counts(len: usize, max_depth: usize) -> Vec<Vec<u128>> {
    let mut table = vec![vec![0u128; max_depth + 2]; len + 1];
    table[0][0] = 1;
    for r in 1..=len {
        for d in 0..=max_depth {
            let up = if d < max_depth { table[r - 1][d + 1] } else { 0 };
            let down = if d > 0 { table[r - 1][d - 1] } else { 0 };
            table[r][d] = up + down;
        }
    }
    table
}

/// Count of balanced strings of length `len` with depth at most `max_depth`.
pub fn count_balanced(len: usize, max_depth: usize) -> u128 {
    completion_counts(len, max_depth)[len][0]
}

fn sample_one(table: &[Vec<u128>], len: usize, max_depth: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(len);
    let mut d = 0usize;
    for pos in 0..len {
        let r = len - pos;
        let opens = if d < max_depth { table[r - 1][d + 1] } else { 0 };
        let total = table[r][d];
        if rng.random_range(0..total) < opens {
            tokens.push(OPEN);
            d += 1;
        } else {
            tokens.push(CLOSE);
            d -= 1;
        }
    }
    tokens
}

/// Distinct train and test sequences, sampled without replacement.
pub fn generate_dyck(config: &DyckConfig) -> Result<DyckSplit, TaskError> {
    let len = config.seq_len;
    if len == 0 || len % 2 != 0 {
        return Err(TaskError::OddLength(len));
    }
    if config.max_depth == 0 || config.max_depth > len / 2 {
        return Err(TaskError::BadDepth { len, max_depth: config.max_depth });
    }
    let table = completion_counts(len, config.max_depth);
    let requested = config.n_train + config.n_test;
    let available = table[len][0];
    if (requested as u128) > available {
        return Err(TaskError::TooFewSequences { available, requested });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::with_capacity(requested);
    let mut all = Vec::with_capacity(requested);
    while all.len() < requested {
        let tokens = sample_one(&table, len, config.max_depth, &mut rng);
        if seen.insert(tokens.clone()) {
            all.push(DyckSequence::from_tokens(tokens));
        }
    }
    let test = all.split_off(config.n_train);
    Ok(DyckSplit { train: all, test })
}

pub(crate) fn batch<'a>(examples: impl Iterator<Item = &'a DyckSequence>) -> SeqBatch {
    let examples: Vec<&DyckSequence> = examples.collect();
    let seq_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let rows = examples.len();
    let mut tokens = Vec::with_capacity(rows * seq_len);
    let mut targets = Vec::with_capacity(rows * seq_len);
    let mut valid = Vec::with_capacity(rows * seq_len);
    for e in examples {
        for t in 0..seq_len {
            match e.tokens.get(t) {
                Some(&tok) => {
                    tokens.push(tok);
                    targets.push(Some(e.depths[t]));
                    valid.push(true);
                }
                None => {
                    tokens.push(PAD);
                    targets.push(None);
                    valid.push(false);
                }
            }
        }
    }
    SeqBatch { rows, seq_len, tokens, targets, valid }
}
