//! Byte-level corpora, the train/validation split and token streams.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lm::TokenBatch;

/// Fraction of the corpus bytes used for training; the rest is validation.
pub const TRAIN_FRACTION: f64 = 0.95;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {0} is not valid UTF-8")]
    NotUtf8(PathBuf),
    #[error("corpus has {available} tokens in windows of {seq}, {requested} requested (short by {short})")]
    Shortfall {
        requested: usize,
        available: usize,
        short: usize,
        seq: usize,
    },
    #[error("corpus split too small for a single window of {0} tokens")]
    TooSmall(usize),
}

/// A UTF-8 text tokenized one byte per token (vocabulary 256).
#[derive(Clone, Debug)]
pub struct Corpus {
    tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        Self {
            tokens: text.bytes().map(usize::from).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = fs::read(path).map_err(|source| CorpusError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|_| CorpusError::NotUtf8(path.to_path_buf()))?;
        Ok(Self::from_text(&text))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Split at byte offset `⌊0.95·len⌋`.
    pub fn split(&self) -> (&[usize], &[usize]) {
        let cut = (self.tokens.len() as f64 * TRAIN_FRACTION).floor() as usize;
        self.tokens.split_at(cut)
    }

    pub fn train(&self) -> &[usize] {
        self.split().0
    }

    pub fn validation(&self) -> &[usize] {
        self.split().1
    }
}

/// Non-overlapping windows of `seq` tokens visited in a seeded order and
/// grouped into batches of `batch_seqs` sequences.
///
/// Every regime draws its data from a `WindowStream` built with the same
/// seed, so they consume identical token orderings.
#[derive(Clone, Debug)]
pub struct WindowStream<'a> {
    tokens: &'a [usize],
    seq: usize,
    order: Vec<usize>,
}

impl<'a> WindowStream<'a> {
    pub fn new(tokens: &'a [usize], seq: usize, seed: u64) -> Result<Self, CorpusError> {
        let n = tokens.len() / seq.max(1);
        if n == 0 {
            return Err(CorpusError::TooSmall(seq));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_D47A));
        Ok(Self { tokens, seq, order })
    }

    /// Windows in their natural order; used for evaluation slices.
    pub fn sequential(tokens: &'a [usize], seq: usize) -> Result<Self, CorpusError> {
        let n = tokens.len() / seq.max(1);
        if n == 0 {
            return Err(CorpusError::TooSmall(seq));
        }
        Ok(Self {
            tokens,
            seq,
            order: (0..n).collect(),
        })
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn windows(&self) -> usize {
        self.order.len()
    }

    pub fn window(&self, i: usize) -> &'a [usize] {
        let w = self.order[i];
        &self.tokens[w * self.seq..(w + 1) * self.seq]
    }

    /// Window index (in corpus order) of the `i`-th streamed window.
    pub fn window_id(&self, i: usize) -> usize {
        self.order[i]
    }

    /// Number of whole windows covering `tokens`, checked against supply.
    pub fn windows_for(&self, tokens: usize) -> Result<usize, CorpusError> {
        let n = tokens / self.seq;
        if n > self.order.len() {
            let available = self.order.len() * self.seq;
            return Err(CorpusError::Shortfall {
                requested: tokens,
                available,
                short: tokens - available,
                seq: self.seq,
            });
        }
        Ok(n)
    }

    /// Batches covering windows `range`, `batch_seqs` at a time; the last
    /// batch may be short.
    pub fn batches(&self, range: std::ops::Range<usize>, batch_seqs: usize) -> Vec<TokenBatch> {
        let batch_seqs = batch_seqs.max(1);
        let mut out = Vec::new();
        let mut start = range.start;
        while start < range.end {
            let end = (start + batch_seqs).min(range.end);
            let mut ids = Vec::with_capacity((end - start) * self.seq);
            for i in start..end {
                ids.extend_from_slice(self.window(i));
            }
            out.push(TokenBatch::new(end - start, self.seq, ids));
            start = end;
        }
        out
    }
}

/// Random (possibly overlapping) windows for LM training.
pub fn random_batch(tokens: &[usize], batch: usize, seq: usize, rng: &mut ChaCha8Rng) -> TokenBatch {
    assert!(tokens.len() > seq, "corpus shorter than one training window");
    let mut ids = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let start = rng.random_range(0..tokens.len() - seq);
        ids.extend_from_slice(&tokens[start..start + seq]);
    }
    TokenBatch::new(batch, seq, ids)
}

/// FNV-1a over a stream of integers; identifies consumed token orderings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHash(pub u64);

impl Default for StreamHash {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl StreamHash {
    pub fn update(&mut self, values: &[usize]) {
        for v in values {
            for b in (*v as u64).to_le_bytes() {
                self.0 ^= u64::from(b);
                self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

const NAMES: &[&str] = &[
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory",
    "oscar", "peggy", "rupert", "sybil", "trent", "victor", "walter",
];
const ADJS: &[&str] = &[
    "red", "blue", "green", "small", "large", "quiet", "loud", "old", "young", "bright", "dark",
    "quick", "slow", "happy", "tired", "clever",
];
const NOUNS: &[&str] = &[
    "fox", "dog", "cat", "bird", "apple", "stone", "river", "tree", "house", "boat", "book",
    "lamp", "horse", "cloud", "garden", "bridge",
];
const PLACES: &[&str] = &[
    "market", "forest", "harbor", "village", "castle", "library", "meadow", "station",
];
const VERBS: &[&str] = &[
    "saw", "found", "painted", "carried", "followed", "sold", "bought", "watched", "lost", "kept",
];
const NUMBERS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Deterministic English-like text with local grammar and long-range
/// copying (names and facts introduced early in a paragraph recur later),
/// so that attention matters and a byte-level LM has something to learn.
pub fn synthetic_text(seed: u64, bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let hero = pick(&mut rng, NAMES);
        let friend = pick(&mut rng, NAMES);
        let adj = pick(&mut rng, ADJS);
        let noun = pick(&mut rng, NOUNS);
        let place = pick(&mut rng, PLACES);
        let count = pick(&mut rng, NUMBERS);
        let sentences = rng.random_range(3..7);
        out.push_str(&format!("{hero} had {count} {adj} {noun}s at the {place}. "));
        for _ in 0..sentences {
            let s = match rng.random_range(0..7) {
                0 => format!(
                    "{hero} {} a {} {} near the {}. ",
                    pick(&mut rng, VERBS),
                    pick(&mut rng, ADJS),
                    pick(&mut rng, NOUNS),
                    pick(&mut rng, PLACES)
                ),
                1 => format!("\"hello, {friend},\" said {hero}. "),
                2 => format!("{friend} asked how many {noun}s {hero} had. "),
                3 => format!("{hero} said: \"i have {count} {noun}s.\" "),
                4 => format!(
                    "the {} {} was {}. ",
                    pick(&mut rng, ADJS),
                    pick(&mut rng, NOUNS),
                    pick(&mut rng, ADJS)
                ),
                5 => format!(
                    "{friend} and {hero} went to the {place} with a {} {}. ",
                    pick(&mut rng, ADJS),
                    pick(&mut rng, NOUNS)
                ),
                _ => format!(
                    "{}, {}, {}. ",
                    pick(&mut rng, NUMBERS),
                    pick(&mut rng, NUMBERS),
                    pick(&mut rng, NUMBERS)
                ),
            };
            out.push_str(&s);
        }
        out.push_str(&format!("so {hero} still had {count} {adj} {noun}s.\n"));
    }
    out.truncate(bytes);
    out
}
