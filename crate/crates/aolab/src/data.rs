//! Corpus ingestion and batch streaming.
//!
//! The character alphabet has 29 ids: 0 is reserved (BOS), 1–26 are 'a'–'z',
//! 27 is space, 28 is MASK. Raw corpus text may only contain 'a'–'z' and
//! space; the reserved ids never appear in an encoded corpus.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub type Token = u8;

pub const BOS: Token = 0;
pub const SPACE: Token = 27;
pub const MASK: Token = 28;
/// Total id count (reserved + letters + space + mask).
pub const VOCAB: usize = 29;
/// Ids that can occur in text: 1–27.
pub const TEXT_IDS: std::ops::RangeInclusive<Token> = 1..=27;

/// Canonical text8 corpus size in bytes.
pub const TEXT8_LEN: usize = 100_000_000;

/// Encode one byte of corpus text.
pub fn encode_byte(b: u8) -> Option<Token> {
    match b {
        b'a'..=b'z' => Some(b - b'a' + 1),
        b' ' => Some(SPACE),
        _ => None,
    }
}

/// Decode one text id back to its byte. Reserved ids map to printable
/// stand-ins so diagnostics stay readable.
pub fn decode_token(t: Token) -> u8 {
    match t {
        1..=26 => b'a' + t - 1,
        SPACE => b' ',
        BOS => b'^',
        MASK => b'_',
        _ => b'?',
    }
}

pub fn encode_str(s: &str) -> Result<Vec<Token>> {
    s.bytes()
        .enumerate()
        .map(|(offset, b)| {
            encode_byte(b).ok_or(Error::InvalidCorpusByte { byte: b, offset })
        })
        .collect()
}

pub fn decode_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(|&t| decode_token(t) as char).collect()
}

/// Train/valid/test index ranges over an encoded corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: (usize, usize),
    pub valid: (usize, usize),
    pub test: (usize, usize),
}

impl CorpusSplits {
    /// 90/5/5 split. For the canonical corpus this is exactly
    /// 90M/5M/5M; smaller fixtures split proportionally.
    pub fn proportional(len: usize) -> Self {
        let train_end = len * 90 / 100;
        let valid_end = len * 95 / 100;
        CorpusSplits {
            train: (0, train_end),
            valid: (train_end, valid_end),
            test: (valid_end, len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// An encoded corpus plus its split boundaries.
#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<Token>,
    splits: CorpusSplits,
}

impl Corpus {
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        for (offset, &t) in tokens.iter().enumerate() {
            if !TEXT_IDS.contains(&t) {
                return Err(Error::InvalidCorpusByte {
                    byte: t,
                    offset,
                });
            }
        }
        let splits = CorpusSplits::proportional(tokens.len());
        Ok(Corpus { tokens, splits })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn splits(&self) -> CorpusSplits {
        self.splits
    }

    pub fn split_tokens(&self, split: Split) -> &[Token] {
        let (a, b) = match split {
            Split::Train => self.splits.train,
            Split::Valid => self.splits.valid,
            Split::Test => self.splits.test,
        };
        &self.tokens[a..b]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

/// Read and encode a raw corpus file (single line of {a-z, space} bytes).
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    let mut tokens = Vec::with_capacity(bytes.len());
    for (offset, &b) in bytes.iter().enumerate() {
        match encode_byte(b) {
            Some(t) => tokens.push(t),
            None => return Err(Error::InvalidCorpusByte { byte: b, offset }),
        }
    }
    let splits = CorpusSplits::proportional(tokens.len());
    Ok(Corpus { tokens, splits })
}

/// The contiguous non-overlapping `seq_len` windows of one split, in a
/// shuffled order determined by (seed, epoch).
pub fn windows_for_epoch(
    split_tokens: &[Token],
    seq_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<usize>> {
    if seq_len == 0 || split_tokens.len() < seq_len {
        return Err(Error::invalid(format!(
            "split of {} tokens cannot tile windows of {}",
            split_tokens.len(),
            seq_len
        )));
    }
    let count = split_tokens.len() / seq_len;
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = stream(seed, Purpose::DataShuffle, epoch);
    for i in (1..count).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    Ok(order)
}

/// Deterministic stream of token batches over one split.
///
/// Each epoch re-tiles the split into non-overlapping windows and shuffles
/// them under an epoch-indexed stream; batches may span epoch boundaries so
/// every yielded batch is full.
pub struct BatchStream<'a> {
    split_tokens: &'a [Token],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        split_tokens: &'a [Token],
        seq_len: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let order = windows_for_epoch(split_tokens, seq_len, seed, 0)?;
        Ok(BatchStream {
            split_tokens,
            seq_len,
            batch_size,
            seed,
            epoch: 0,
            order,
            cursor: 0,
        })
    }

    /// Sequences per epoch.
    pub fn windows_per_epoch(&self) -> usize {
        self.order.len()
    }

    /// Skip ahead as if `windows` sequences had already been consumed, so a
    /// resumed run sees exactly the batches the original run would have.
    pub fn fast_forward(&mut self, windows: u64) -> Result<()> {
        let per_epoch = self.order.len() as u64;
        let epoch = windows / per_epoch;
        if epoch != self.epoch {
            self.epoch = epoch;
            self.order = windows_for_epoch(self.split_tokens, self.seq_len, self.seed, epoch)?;
        }
        self.cursor = (windows % per_epoch) as usize;
        Ok(())
    }

    fn next_window(&mut self) -> Result<&'a [Token]> {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.order =
                windows_for_epoch(self.split_tokens, self.seq_len, self.seed, self.epoch)?;
            self.cursor = 0;
        }
        let w = self.order[self.cursor];
        self.cursor += 1;
        Ok(&self.split_tokens[w * self.seq_len..(w + 1) * self.seq_len])
    }

    /// The next full batch of `batch_size` windows.
    pub fn next_batch(&mut self) -> Result<Vec<&'a [Token]>> {
        (0..self.batch_size).map(|_| self.next_window()).collect()
    }
}

/// Kinds of deterministic synthetic corpora used by training sanity tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Every token is id 1.
    Constant,
    /// Repeating cycle 1,2,…,p.
    Periodic(u8),
    /// Uniform over ids 1–27.
    UniformRandom,
}

pub fn synthetic_corpus(kind: SyntheticKind, length: usize, seed: u64) -> Result<Corpus> {
    let tokens = match kind {
        SyntheticKind::Constant => vec![1u8; length],
        SyntheticKind::Periodic(p) => {
            if p == 0 || p > 26 {
                return Err(Error::invalid(format!(
                    "periodic cycle length {} outside 1..=26",
                    p
                )));
            }
            (0..length).map(|i| (i % p as usize) as u8 + 1).collect()
        }
        SyntheticKind::UniformRandom => {
            let mut rng = stream(seed, Purpose::Synthetic, 0);
            (0..length)
                .map(|_| rng.gen_range(1..=27u8))
                .collect()
        }
    };
    Corpus::from_tokens(tokens)
}
