//! Tweet text to fixed-length integer sequences.
//!
//! Tokens are lowercased whitespace-split words. A vocabulary maps each
//! token to a dense positive index; index 0 is reserved for both unknown
//! words and padding. Sequences are truncated to the first `max_len`
//! tokens or left-padded with zeros so real content always occupies the
//! final positions (the ones the classifier head sees last).

use std::collections::HashMap;

use crate::error::{Error, Result};

/// One labeled input record: an opaque id, an integer class label and the
/// raw tweet text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledRecord {
    pub id: String,
    pub label: usize,
    pub text: String,
}

impl LabeledRecord {
    pub fn new(id: impl Into<String>, label: usize, text: impl Into<String>) -> Self {
        LabeledRecord {
            id: id.into(),
            label,
            text: text.into(),
        }
    }
}

/// Token-to-index dictionary. Indices are dense in `1..size()`; index 0 is
/// never assigned to a token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    tokens: Vec<String>, // tokens[i] has index i + 1
}

impl Vocabulary {
    /// Number of distinct indices including the reserved 0.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Index for a token; 0 when unknown.
    pub fn index_of(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(0)
    }

    /// Token owning a positive index, if assigned.
    pub fn token_of(&self, index: usize) -> Option<&str> {
        if index == 0 {
            return None;
        }
        self.tokens.get(index - 1).map(|s| s.as_str())
    }

    /// Tokens in index order (index 1 first).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds a vocabulary from tokens listed in index order. Used by
    /// model-file loading; rejects duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if token_to_index.insert(tok.clone(), i + 1).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_index,
            tokens,
        })
    }
}

/// Fixed-length integer encoding of one tweet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    indices: Vec<usize>,
}

impl EncodedSequence {
    /// Wraps raw indices. Entries must be valid for the embedding table
    /// they are used with; `embed` checks the bound.
    pub fn from_indices(indices: Vec<usize>) -> Self {
        EncodedSequence { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Encoded corpus: one sequence row per retained record with labels kept
/// aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDataset {
    pub sequences: Vec<EncodedSequence>,
    pub labels: Vec<usize>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// (rows, max_len) of the sequence matrix.
    pub fn shape(&self) -> (usize, usize) {
        let cols = self.sequences.first().map_or(0, |s| s.len());
        (self.sequences.len(), cols)
    }
}

/// Lowercases and splits on Unicode whitespace. Empty tokens are dropped;
/// punctuation stays attached to its word.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Builds the dictionary from a corpus: tokens ranked by descending
/// frequency, ties broken by first occurrence, indices assigned from 1.
/// With `top_words` set, only the that many highest-ranked tokens receive
/// indices; everything else maps to 0.
pub fn build_vocabulary(corpus: &[LabeledRecord], top_words: Option<usize>) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus for vocabulary construction"));
    }
    // (count, first occurrence position) per token
    let mut stats: HashMap<String, (u64, usize)> = HashMap::new();
    let mut position = 0usize;
    for record in corpus {
        for token in tokenize(&record.text) {
            let entry = stats.entry(token).or_insert((0, position));
            entry.0 += 1;
            position += 1;
        }
    }
    let mut ranked: Vec<(String, (u64, usize))> = stats.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    if let Some(cap) = top_words {
        ranked.truncate(cap);
    }
    let tokens: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
    Vocabulary::from_tokens(tokens)
}

/// Maps tokens to indices (unknown -> 0), keeps the first `max_len` tokens
/// of overlong inputs, and left-pads short ones with zeros.
pub fn encode_sequence(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> EncodedSequence {
    assert!(max_len > 0, "max_len must be positive");
    let mapped: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.index_of(t))
        .collect();
    let mut indices = vec![0usize; max_len - mapped.len()];
    indices.extend(mapped);
    EncodedSequence { indices }
}

/// Encodes a record list into the sequence matrix plus aligned labels.
/// With `discard_long` set, records with more than `max_len` tokens are
/// dropped; otherwise they are truncated.
pub fn encode_dataset(
    records: &[LabeledRecord],
    vocab: &Vocabulary,
    max_len: usize,
    discard_long: bool,
) -> EncodedDataset {
    assert!(max_len > 0, "max_len must be positive");
    let mut sequences = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for record in records {
        let tokens = tokenize(&record.text);
        if discard_long && tokens.len() > max_len {
            continue;
        }
        sequences.push(encode_sequence(&tokens, vocab, max_len));
        labels.push(record.label);
    }
    EncodedDataset { sequences, labels }
}
