//! SCAN command-to-action pairs: file ingestion, vocabularies and the
//! seeded train/test split.
//!
//! Source lines follow `IN: <command tokens> OUT: <action tokens>`.

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Seq2SeqBatch, TaskError};

/// Command-side special ids.
pub const CMD_PAD: usize = 0;
pub const CMD_EOS: usize = 1;
const CMD_SPECIALS: [&str; 2] = ["<pad>", "<eos>"];

/// Action-side special ids.
pub const ACT_PAD: usize = 0;
pub const ACT_BOS: usize = 1;
pub const ACT_EOS: usize = 2;
const ACT_SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub path: PathBuf,
    pub n_train: usize,
    pub data_seed: u64,
}

impl ScanConfig {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ScanConfig { path: path.into(), n_train: 2048, data_seed: 0 }
    }
}

/// Token tables; ids below the special count are reserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanVocab {
    pub commands: Vec<String>,
    pub actions: Vec<String>,
}

impl ScanVocab {
    fn from_words(cmd: BTreeSet<String>, act: BTreeSet<String>) -> Self {
        let commands = CMD_SPECIALS.iter().map(|s| s.to_string()).chain(cmd).collect();
        let actions = ACT_SPECIALS.iter().map(|s| s.to_string()).chain(act).collect();
        ScanVocab { commands, actions }
    }

    /// Distinct command words in the source, specials excluded.
    pub fn command_words(&self) -> usize {
        self.commands.len() - CMD_SPECIALS.len()
    }

    /// Distinct action words in the source, specials excluded.
    pub fn action_words(&self) -> usize {
        self.actions.len() - ACT_SPECIALS.len()
    }

    pub fn command_id(&self, w: &str) -> Option<usize> {
        self.commands.iter().position(|c| c == w)
    }

    pub fn action_id(&self, w: &str) -> Option<usize> {
        self.actions.iter().position(|c| c == w)
    }

    pub fn decode_actions(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.actions[i].as_str()).collect()
    }
}

/// One pair as vocabulary ids, without boundary tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScanExample {
    pub command: Vec<usize>,
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ScanSplit {
    pub train: Vec<ScanExample>,
    pub test: Vec<ScanExample>,
    pub vocab: ScanVocab,
    /// Longest command in the file, boundary excluded.
    pub max_command_len: usize,
    /// Longest action sequence in the file, boundary excluded.
    pub max_action_len: usize,
}

/// Splits `IN: ... OUT: ...` into its two token lists.
pub fn parse_scan_line(line: &str, line_no: usize) -> Result<(Vec<String>, Vec<String>), TaskError> {
    let malformed = || TaskError::Malformed { line: line_no, content: line.to_string() };
    let rest = line.strip_prefix("IN: ").or_else(|| (line == "IN:").then_some("")).ok_or_else(malformed)?;
    let (cmd, act) = match rest.split_once("OUT:") {
        Some((c, a)) => (c, a),
        None => return Err(malformed()),
    };
    if !(cmd.is_empty() || cmd.ends_with(' ')) || !(act.is_empty() || act.starts_with(' ')) {
        return Err(malformed());
    }
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let actions = words(act);
    if actions.is_empty() {
        return Err(malformed());
    }
    Ok((words(cmd), actions))
}

/// Reads the file, builds vocabularies over all pairs and samples
/// `n_train` training pairs with `data_seed`; the rest form the test set.
/// Duplicate commands are kept once so the two sets stay disjoint.
pub fn load_scan(config: &ScanConfig) -> Result<ScanSplit, TaskError> {
    let path_str = config.path.display().to_string();
    if !config.path.exists() {
        return Err(TaskError::MissingFile(path_str));
    }
    let text = std::fs::read_to_string(&config.path).map_err(|source| TaskError::Io { path: path_str, source })?;
    split_scan(&text, config.n_train, config.data_seed)
}

/// [`load_scan`] on text already in memory.
pub fn split_scan(text: &str, n_train: usize, data_seed: u64) -> Result<ScanSplit, TaskError> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (cmd, act) = parse_scan_line(line.trim_end(), i + 1)?;
        if seen.insert(cmd.join(" ")) {
            pairs.push((cmd, act));
        }
    }
    let cmd_words: BTreeSet<String> = pairs.iter().flat_map(|(c, _)| c.iter().cloned()).collect();
    let act_words: BTreeSet<String> = pairs.iter().flat_map(|(_, a)| a.iter().cloned()).collect();
    let vocab = ScanVocab::from_words(cmd_words, act_words);
    let mut examples: Vec<ScanExample> = pairs
        .iter()
        .map(|(c, a)| ScanExample {
            command: c.iter().map(|w| vocab.command_id(w).expect("word in vocab")).collect(),
            actions: a.iter().map(|w| vocab.action_id(w).expect("word in vocab")).collect(),
        })
        .collect();
    if examples.len() <= n_train {
        return Err(TaskError::SplitTooLarge { n_train, available: examples.len() });
    }
    let max_command_len = examples.iter().map(|e| e.command.len()).max().unwrap_or(0);
    let max_action_len = examples.iter().map(|e| e.actions.len()).max().unwrap_or(0);
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(data_seed));
    let test = examples.split_off(n_train);
    Ok(ScanSplit { train: examples, test, vocab, max_command_len, max_action_len })
}

pub(crate) fn batch<'a>(examples: impl Iterator<Item = &'a ScanExample>) -> Seq2SeqBatch {
    let examples: Vec<&ScanExample> = examples.collect();
    let rows = examples.len();
    let src_len = examples.iter().map(|e| e.command.len() + 1).max().unwrap_or(1);
    let tgt_len = examples.iter().map(|e| e.actions.len() + 1).max().unwrap_or(1);
    let mut b = Seq2SeqBatch {
        rows,
        src_len,
        tgt_len,
        src: Vec::with_capacity(rows * src_len),
        src_valid: Vec::with_capacity(rows * src_len),
        tgt_in: Vec::with_capacity(rows * tgt_len),
        tgt_valid: Vec::with_capacity(rows * tgt_len),
        tgt_out: Vec::with_capacity(rows * tgt_len),
    };
    for e in examples {
        for t in 0..src_len {
            let (tok, ok) = match t.cmp(&e.command.len()) {
                std::cmp::Ordering::Less => (e.command[t], true),
                std::cmp::Ordering::Equal => (CMD_EOS, true),
                std::cmp::Ordering::Greater => (CMD_PAD, false),
            };
            b.src.push(tok);
            b.src_valid.push(ok);
        }
        for t in 0..tgt_len {
            if t <= e.actions.len() {
                b.tgt_in.push(if t == 0 { ACT_BOS } else { e.actions[t - 1] });
                b.tgt_out.push(Some(if t < e.actions.len() { e.actions[t] } else { ACT_EOS }));
                b.tgt_valid.push(true);
            } else {
                b.tgt_in.push(ACT_PAD);
                b.tgt_out.push(None);
                b.tgt_valid.push(false);
            }
        }
    }
    b
}

/// Every command of the SCAN grammar with its action sequence, in the
/// `IN: ... OUT: ...` line format. The grammar yields 20,910 commands.
pub fn grammar_lines() -> Vec<String> {
    const PRIMS: [(&str, &str); 4] = [("walk", "I_WALK"), ("look", "I_LOOK"), ("run", "I_RUN"), ("jump", "I_JUMP")];
    const DIRS: [(&str, &str); 2] = [("left", "I_TURN_LEFT"), ("right", "I_TURN_RIGHT")];

    // (command words, action words) for every V.
    let mut verbs: Vec<(Vec<&str>, Vec<&str>)> = Vec::new();
    for (u, a) in PRIMS {
        verbs.push((vec![u], vec![a]));
    }
    // Directed phrases: "U dir" / "turn dir", then the opposite and around forms.
    let mut heads: Vec<(&str, Option<&str>)> = PRIMS.iter().map(|(u, a)| (*u, Some(*a))).collect();
    heads.push(("turn", None));
    for (h, act) in &heads {
        for (d, turn) in DIRS {
            let unit: Vec<&str> = std::iter::once(turn).chain(*act).collect();
            verbs.push((vec![h, d], unit.clone()));
            let opposite: Vec<&str> = std::iter::once(turn).chain(unit.iter().copied()).collect();
            verbs.push((vec![h, "opposite", d], opposite));
            verbs.push((vec![h, "around", d], unit.repeat(4)));
        }
    }
    let mut sentences: Vec<(Vec<&str>, Vec<&str>)> = Vec::new();
    for (c, a) in &verbs {
        sentences.push((c.clone(), a.clone()));
        sentences.push(([c.as_slice(), &["twice"]].concat(), a.repeat(2)));
        sentences.push(([c.as_slice(), &["thrice"]].concat(), a.repeat(3)));
    }
    let mut lines = Vec::new();
    let fmt = |c: &[&str], a: &[&str]| format!("IN: {} OUT: {}", c.join(" "), a.join(" "));
    for (c, a) in &sentences {
        lines.push(fmt(c, a));
    }
    for (c1, a1) in &sentences {
        for (c2, a2) in &sentences {
            lines.push(fmt(&[c1.as_slice(), &["and"], c2.as_slice()].concat(), &[a1.as_slice(), a2.as_slice()].concat()));
            lines.push(fmt(&[c1.as_slice(), &["after"], c2.as_slice()].concat(), &[a2.as_slice(), a1.as_slice()].concat()));
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_the_line_format() {
        let (c, a) = parse_scan_line("IN: jump OUT: I_JUMP", 1).unwrap();
        assert_eq!(c, ["jump"]);
        assert_eq!(a, ["I_JUMP"]);
        let (c, a) = parse_scan_line("IN: turn left twice OUT: I_TURN_LEFT I_TURN_LEFT", 1).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn empty_command_is_accepted() {
        let (c, a) = parse_scan_line("IN: OUT: I_WALK", 1).unwrap();
        assert!(c.is_empty());
        assert_eq!(a, ["I_WALK"]);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        for bad in ["jump OUT: I_JUMP", "IN: jump I_JUMP", "IN: jumpOUT: I_JUMP", "IN: jump OUT:"] {
            match parse_scan_line(bad, 7) {
                Err(TaskError::Malformed { line: 7, .. }) => {}
                other => panic!("{bad:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn missing_file_is_a_distinct_error() {
        let err = load_scan(&ScanConfig::new("/nonexistent/scan.txt")).unwrap_err();
        assert!(matches!(err, TaskError::MissingFile(_)));
    }

    #[test]
    fn malformed_file_line_is_located() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "IN: jump OUT: I_JUMP").unwrap();
        writeln!(f, "IN: walk I_WALK").unwrap();
        let err = load_scan(&ScanConfig { n_train: 1, ..ScanConfig::new(f.path()) }).unwrap_err();
        assert!(matches!(err, TaskError::Malformed { line: 2, .. }));
    }

    #[test]
    fn grammar_has_twenty_thousand_nine_hundred_ten_commands() {
        let lines = grammar_lines();
        assert_eq!(lines.len(), 20_910);
        let unique: HashSet<_> = lines.iter().collect();
        assert_eq!(unique.len(), lines.len());
        assert!(lines.contains(&"IN: jump around left OUT: I_TURN_LEFT I_JUMP I_TURN_LEFT I_JUMP I_TURN_LEFT I_JUMP I_TURN_LEFT I_JUMP".to_string()));
        assert!(lines.contains(&"IN: turn opposite right OUT: I_TURN_RIGHT I_TURN_RIGHT".to_string()));
        assert!(lines.contains(&"IN: walk after run twice OUT: I_RUN I_RUN I_WALK".to_string()));
    }

    #[test]
    fn batch_adds_boundaries_and_padding() {
        let a = ScanExample { command: vec![5], actions: vec![3] };
        let b = ScanExample { command: vec![5, 6], actions: vec![3, 4] };
        let batch = batch([&a, &b].into_iter());
        assert_eq!((batch.src_len, batch.tgt_len), (3, 3));
        assert_eq!(&batch.src[..3], &[5, CMD_EOS, CMD_PAD]);
        assert_eq!(&batch.tgt_in[..3], &[ACT_BOS, 3, ACT_PAD]);
        assert_eq!(&batch.tgt_out[..3], &[Some(3), Some(ACT_EOS), None]);
        assert_eq!(&batch.tgt_out[3..], &[Some(3), Some(4), Some(ACT_EOS)]);
    }
}
