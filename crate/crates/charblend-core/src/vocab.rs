//! Alphabet, normalization, dataset ingestion, and fold splitting.
//!
//! The alphabet is fixed to the 26 lowercase letters plus three reserved
//! symbols: a pad symbol (also the decoder start-of-sequence token), the
//! root separator `;`, and the stop mark `.`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::seq::SliceRandom;

/// Index of a symbol in the alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolId(pub usize);

/// Display character for the pad symbol.
pub const PAD_CHAR: char = '_';
/// Root-word separator in concatenated inputs.
pub const SEPARATOR_CHAR: char = ';';
/// End-of-sequence mark.
pub const STOP_CHAR: char = '.';

/// Bijective character <-> id map over `_abcdefghijklmnopqrstuvwxyz;.`
///
/// Ids are fixed: pad = 0, letters = 1..=26, separator = 27, stop = 28.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Alphabet::standard()
    }
}

impl Alphabet {
    /// The 29-symbol alphabet used throughout.
    pub fn standard() -> Self {
        let mut symbols = vec![PAD_CHAR];
        symbols.extend('a'..='z');
        symbols.push(SEPARATOR_CHAR);
        symbols.push(STOP_CHAR);
        Alphabet { symbols }
    }

    /// Reconstruct from a serialized symbol string; must match the
    /// standard layout (pad first, separator and stop reserved).
    pub fn from_symbols(s: &str) -> Result<Self> {
        let std = Alphabet::standard();
        if s.chars().collect::<Vec<_>>() != std.symbols {
            return Err(Error::ModelFormat(format!(
                "unsupported alphabet {s:?}; expected {:?}",
                std.symbols_string()
            )));
        }
        Ok(std)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pad(&self) -> SymbolId {
        SymbolId(0)
    }

    pub fn separator(&self) -> SymbolId {
        SymbolId(27)
    }

    pub fn stop(&self) -> SymbolId {
        SymbolId(28)
    }

    /// True for plain letters (not pad/separator/stop).
    pub fn is_letter(&self, id: SymbolId) -> bool {
        (1..=26).contains(&id.0)
    }

    pub fn id_of(&self, ch: char) -> Result<SymbolId> {
        self.symbols
            .iter()
            .position(|&c| c == ch)
            .map(SymbolId)
            .ok_or(Error::Encoding { ch })
    }

    pub fn char_of(&self, id: SymbolId) -> char {
        self.symbols[id.0]
    }

    pub fn encode(&self, s: &str) -> Result<Vec<SymbolId>> {
        s.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode(&self, ids: &[SymbolId]) -> String {
        ids.iter().map(|&id| self.char_of(id)).collect()
    }

    /// Serialized form for model files.
    pub fn symbols_string(&self) -> String {
        self.symbols.iter().collect()
    }

    /// FNV-1a hash of the symbol string; stored in hyperparameters so
    /// stores trained against different alphabets cannot be mixed.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.symbols_string().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

// ── Normalization ────────────────────────────────────────────────────

/// What to do with characters outside a-z after lowercasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizePolicy {
    /// Silently drop digits, hyphens, apostrophes, whitespace, etc.
    #[default]
    Drop,
    /// Reject the whole record when any such character appears.
    Reject,
}

/// Lowercase and restrict to the letter alphabet.
pub fn normalize(raw: &str, policy: NormalizePolicy) -> Result<String> {
    let lowered = raw.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for ch in lowered.chars() {
        if ch.is_ascii_lowercase() {
            out.push(ch);
        } else if policy == NormalizePolicy::Reject {
            return Err(Error::RejectedRecord(format!(
                "{raw:?} contains unsupported character {ch:?}"
            )));
        }
    }
    if out.is_empty() {
        return Err(Error::RejectedRecord(format!(
            "{raw:?} is empty after normalization"
        )));
    }
    Ok(out)
}

// ── Examples and datasets ────────────────────────────────────────────

/// A (root1, root2, portmanteau) triple in normalized form. The target
/// is absent for inference-only records.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub root1: String,
    pub root2: String,
    pub target: Option<String>,
}

impl Example {
    /// Normalize all parts; fails if any part normalizes to empty.
    pub fn new(root1: &str, root2: &str, target: Option<&str>, policy: NormalizePolicy) -> Result<Self> {
        Ok(Example {
            root1: normalize(root1, policy)?,
            root2: normalize(root2, policy)?,
            target: target.map(|t| normalize(t, policy)).transpose()?,
        })
    }

    /// Ground truth, for records that carry one.
    pub fn truth(&self) -> Option<&str> {
        self.target.as_deref()
    }
}

impl fmt::Display for Example {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{};{} -> {}",
            self.root1,
            self.root2,
            self.target.as_deref().unwrap_or("?")
        )
    }
}

/// Why a dataset line was not turned into an [`Example`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub line_no: usize,
    pub cause: String,
    pub raw: String,
}

/// Result of loading a dataset file: the kept examples plus an audit
/// trail of everything that was skipped.
#[derive(Debug, Clone, Default)]
pub struct DatasetLoad {
    pub examples: Vec<Example>,
    pub rejections: Vec<Rejection>,
}

/// Load a TSV dataset: one `root1<TAB>root2<TAB>portmanteau` per line,
/// `#`-prefixed comment lines ignored. Malformed lines are recorded as
/// rejections, never fatal; an unreadable file is.
pub fn load_dataset(path: impl AsRef<Path>, policy: NormalizePolicy) -> Result<DatasetLoad> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(parse_dataset(&text, policy))
}

/// Parse dataset text (see [`load_dataset`]).
pub fn parse_dataset(text: &str, policy: NormalizePolicy) -> DatasetLoad {
    let mut out = DatasetLoad::default();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let reject = |cause: String| Rejection {
            line_no,
            cause,
            raw: line.to_string(),
        };
        if line.starts_with('#') {
            continue;
        }
        if line.trim().is_empty() {
            out.rejections.push(reject("blank line".into()));
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            out.rejections.push(reject(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
            continue;
        }
        match Example::new(fields[0], fields[1], Some(fields[2]), policy) {
            Ok(e) => {
                let key = (
                    e.root1.clone(),
                    e.root2.clone(),
                    e.target.clone().unwrap_or_default(),
                );
                if seen.insert(key) {
                    out.examples.push(e);
                } else {
                    out.rejections.push(reject("duplicate triple".into()));
                }
            }
            Err(err) => out.rejections.push(reject(err.to_string())),
        }
    }
    out
}

/// Encode the concatenated input `root1 ; root2`.
pub fn encode_input(e: &Example, alphabet: &Alphabet) -> Result<Vec<SymbolId>> {
    let mut ids = alphabet.encode(&e.root1)?;
    ids.push(alphabet.separator());
    ids.extend(alphabet.encode(&e.root2)?);
    Ok(ids)
}

/// Encode an output word with the trailing stop id.
pub fn encode_target_word(word: &str, alphabet: &Alphabet) -> Result<Vec<SymbolId>> {
    let mut ids = alphabet.encode(word)?;
    ids.push(alphabet.stop());
    Ok(ids)
}

// ── Word lists ───────────────────────────────────────────────────────

/// Deduplicated normalized dictionary words for LM / embedding
/// pretraining.
#[derive(Debug, Clone, Default)]
pub struct WordList {
    pub words: Vec<String>,
    /// Lines that failed normalization and were skipped.
    pub skipped: usize,
}

impl WordList {
    /// One word per line; invalid words are skipped and counted.
    pub fn load(path: impl AsRef<Path>, policy: NormalizePolicy) -> Result<WordList> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(WordList::parse(&text, policy))
    }

    pub fn parse(text: &str, policy: NormalizePolicy) -> WordList {
        let mut seen = HashSet::new();
        let mut words = Vec::new();
        let mut skipped = 0usize;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match normalize(line, policy) {
                Ok(w) => {
                    if seen.insert(w.clone()) {
                        words.push(w);
                    }
                }
                Err(_) => skipped += 1,
            }
        }
        WordList { words, skipped }
    }

    pub fn from_words(words: impl IntoIterator<Item = impl Into<String>>) -> WordList {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
        WordList {
            words: out,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

// ── Fold plans ───────────────────────────────────────────────────────

/// Deterministic k-fold partition. For fold `i` the test set is fold
/// `i`, validation is fold `(i+1) % k`, and training is the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// `assignment[example_index] = fold id`.
    pub assignment: Vec<usize>,
}

/// Shuffle indices with the seed and deal them round-robin into k folds.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || n < k {
        return Err(Error::Contract(format!(
            "cannot split {n} examples into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut assignment = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % k;
    }
    Ok(FoldPlan { k, seed, assignment })
}

impl FoldPlan {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.indices_of(fold)
    }

    pub fn valid_indices(&self, fold: usize) -> Vec<usize> {
        self.indices_of((fold + 1) % self.k)
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let valid = (fold + 1) % self.k;
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold && f != valid)
            .map(|(i, _)| i)
            .collect()
    }

    fn indices_of(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Audit export: one `index<TAB>fold` per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, f) in self.assignment.iter().enumerate() {
            s.push_str(&format!("{i}\t{f}\n"));
        }
        s
    }
}
