//! Corpus ingestion, character vocabularies and padded minibatches.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;

/// Glyph rendered for [`UNK`] when decoding.
pub const UNK_GLYPH: char = '\u{FFFD}';

/// Sources are grouped by length in buckets of this many characters.
pub const BUCKET_WIDTH: usize = 4;

/// One source name and every accepted transliteration of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePair {
    pub source: String,
    pub targets: Vec<String>,
}

impl SequencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            targets: vec![target.into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SequencePair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

/// Parses `source<TAB>ref1[<TAB>ref2...]` lines. Blank and `#` lines are skipped; repeated
/// sources are merged in first-seen order.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<SequencePair>> {
    let mut pairs: Vec<SequencePair> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let mut fields = line.split('\t');
        let source = fields.next().unwrap_or_default();
        let targets: Vec<&str> = fields.collect();
        if targets.is_empty() {
            return Err(parse_err("expected a tab between source and target"));
        }
        if source.is_empty() || targets.iter().any(|t| t.is_empty()) {
            return Err(parse_err("empty field"));
        }
        let slot = *index.entry(source.to_string()).or_insert_with(|| {
            pairs.push(SequencePair {
                source: source.to_string(),
                targets: Vec::new(),
            });
            pairs.len() - 1
        });
        let existing = &mut pairs[slot].targets;
        for t in targets {
            if !existing.iter().any(|e| e == t) {
                existing.push(t.to_string());
            }
        }
    }
    Ok(pairs)
}

pub fn format_corpus(pairs: &[SequencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.source);
        for t in &p.targets {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
    }
    out
}

/// Bijection between characters and ids, with ids `0..4` reserved for PAD, BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct Vocabulary {
    chars: Vec<char>,
    #[serde(skip)]
    ids: HashMap<char, u32>,
}

impl From<String> for Vocabulary {
    fn from(s: String) -> Self {
        Self::from_chars(s.chars())
    }
}

impl From<Vocabulary> for String {
    fn from(v: Vocabulary) -> Self {
        v.chars.into_iter().collect()
    }
}

impl Vocabulary {
    /// Assigns ids in first-seen order; duplicates are ignored.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Self {
            chars: Vec::new(),
            ids: HashMap::new(),
        };
        for c in chars {
            if !v.ids.contains_key(&c) {
                v.ids.insert(c, (RESERVED + v.chars.len()) as u32);
                v.chars.push(c);
            }
        }
        v
    }

    pub fn build(pairs: &[SequencePair], side: Side) -> Self {
        match side {
            Side::Source => Self::from_chars(pairs.iter().flat_map(|p| p.source.chars())),
            Side::Target => Self::from_chars(
                pairs
                    .iter()
                    .flat_map(|p| p.targets.iter().flat_map(|t| t.chars())),
            ),
        }
    }

    /// Total ids including the reserved ones.
    pub fn len(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.ids.get(&c).copied()
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        (id as usize)
            .checked_sub(RESERVED)
            .and_then(|i| self.chars.get(i).copied())
    }

    /// Non-reserved characters in id order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, s: &str, add_eos: bool) -> Vec<u32> {
        let mut ids: Vec<u32> = s.chars().map(|c| self.id_of(c).unwrap_or(UNK)).collect();
        if add_eos {
            ids.push(EOS);
        }
        ids
    }

    /// Stops at the first EOS and drops PAD/BOS; UNK becomes [`UNK_GLYPH`].
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                UNK => out.push(UNK_GLYPH),
                _ => out.push(self.char_of(id).ok_or(Error::Range {
                    id,
                    size: self.len(),
                })?),
            }
        }
        Ok(out)
    }
}

/// Row-major `[rows × cols]` id matrix padded with PAD, plus its `{0,1}` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedIds {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl PaddedIds {
    pub fn new(seqs: &[Vec<u32>]) -> Self {
        let cols = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Self::with_width(seqs, cols)
    }

    /// Pads every row to exactly `cols` (at least the longest sequence).
    pub fn with_width(seqs: &[Vec<u32>], cols: usize) -> Self {
        let cols = cols.max(seqs.iter().map(Vec::len).max().unwrap_or(0));
        let rows = seqs.len();
        let mut ids = vec![PAD; rows * cols];
        let mut mask = vec![0.0; rows * cols];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * cols..r * cols + s.len()].copy_from_slice(s);
            mask[r * cols..r * cols + s.len()].fill(1.0);
        }
        Self {
            rows,
            cols,
            ids,
            mask,
            lengths: seqs.iter().map(Vec::len).collect(),
        }
    }

    /// Ids of column `t` across all rows.
    pub fn column(&self, t: usize) -> Vec<u32> {
        (0..self.rows).map(|r| self.ids[r * self.cols + t]).collect()
    }

    pub fn mask_column(&self, t: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.mask[r * self.cols + t]).collect()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..r * self.cols + self.lengths[r]]
    }
}

/// A padded minibatch. `examples[i] = (pair index, target index)` for row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: PaddedIds,
    pub tgt: PaddedIds,
    pub examples: Vec<(usize, usize)>,
}

impl Batch {
    /// Builds a batch from already-encoded sequences. Targets must end with EOS.
    pub fn from_ids(src: &[Vec<u32>], tgt: &[Vec<u32>]) -> Result<Self> {
        if src.len() != tgt.len() || src.is_empty() {
            return Err(Error::InvalidInput(format!(
                "batch needs matching non-empty sides, got {} sources and {} targets",
                src.len(),
                tgt.len()
            )));
        }
        if src.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("empty source sequence".into()));
        }
        if tgt.iter().any(|t| t.last() != Some(&EOS)) {
            return Err(Error::InvalidInput("target sequence must end with EOS".into()));
        }
        Ok(Self {
            src: PaddedIds::new(src),
            tgt: PaddedIds::new(tgt),
            examples: (0..src.len()).map(|i| (i, 0)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.src.rows
    }

    pub fn is_empty(&self) -> bool {
        self.src.rows == 0
    }

    /// Number of unmasked target positions, EOS included.
    pub fn target_tokens(&self) -> usize {
        self.tgt.lengths.iter().sum()
    }
}

/// Splits the corpus into padded minibatches covering every (source, reference) example once.
///
/// Examples are ordered by source-length bucket so each batch pads little. Targets are not
/// part of the key: on substitution-like data the target length within a source bucket
/// tracks which rules fired, and grouping on it makes batches sharply non-iid.
///
/// With `shuffle`, the example order inside buckets and the batch order are permuted by a
/// RNG seeded from `seed`.
pub fn make_batches(
    pairs: &[SequencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be at least 1".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let mut examples: Vec<(usize, usize, Vec<u32>, Vec<u32>)> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.source.is_empty() {
            return Err(Error::InvalidInput(format!("pair {i} has an empty source")));
        }
        let src = src_vocab.encode(&p.source, false);
        for (j, t) in p.targets.iter().enumerate() {
            examples.push((i, j, src.clone(), tgt_vocab.encode(t, true)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if shuffle {
        examples.shuffle(&mut rng);
    }
    examples.sort_by_key(|(_, _, s, _)| s.len() / BUCKET_WIDTH);

    let mut batches: Vec<Batch> = examples
        .chunks(batch_size)
        .map(|chunk| {
            let src: Vec<Vec<u32>> = chunk.iter().map(|e| e.2.clone()).collect();
            let tgt: Vec<Vec<u32>> = chunk.iter().map(|e| e.3.clone()).collect();
            Batch {
                src: PaddedIds::new(&src),
                tgt: PaddedIds::new(&tgt),
                examples: chunk.iter().map(|e| (e.0, e.1)).collect(),
            }
        })
        .collect();
    if shuffle {
        batches.shuffle(&mut rng);
    }
    Ok(batches)
}
