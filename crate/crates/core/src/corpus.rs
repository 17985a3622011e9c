//! Synthetic tasks, plain-text ingestion, vocabularies and padded batches.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Batches sorted by length together inside one shuffle window.
pub const BUCKET_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Sort => "sort",
        }
    }

    /// Applies the task to a sequence of symbol indices.
    pub fn apply(self, src: &[usize]) -> Vec<usize> {
        let mut out = src.to_vec();
        match self {
            Task::Copy => {}
            Task::Reverse => out.reverse(),
            Task::Sort => out.sort_unstable(),
        }
        out
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort" => Ok(Task::Sort),
            _ => Err(Error::Config(format!("unknown task '{s}' (valid: copy, reverse, sort)"))),
        }
    }
}

/// Surface form of synthetic symbol `k`.
pub fn symbol(k: usize) -> String {
    format!("w{k}")
}

/// Aligned source/target token sequences. Targets end with `</s>`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(s, _)| s.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|(_, t)| t.as_slice())
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let tail = self.pairs.split_off(self.pairs.len().saturating_sub(n));
        (self, Self { pairs: tail })
    }
}

/// Random sequences over `vocab_size` symbols with lengths drawn uniformly
/// from `min_len..=max_len`.
pub fn gen_synthetic(task: Task, vocab_size: usize, min_len: usize, max_len: usize, count: usize, seed: u64) -> Result<ParallelCorpus> {
    if vocab_size == 0 || min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!(
            "synthetic task needs vocab ≥ 1 and 1 ≤ min_len ≤ max_len, got vocab {vocab_size}, lengths {min_len}..={max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..count)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
            let mut tgt: Vec<String> = task.apply(&src).into_iter().map(symbol).collect();
            tgt.push(RESERVED[EOS].to_string());
            (src.into_iter().map(symbol).collect(), tgt)
        })
        .collect();
    Ok(ParallelCorpus { pairs })
}

fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Counts of what ingestion or batching kept and why it dropped the rest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub kept: usize,
    pub dropped_empty: usize,
    pub dropped_too_long: usize,
}

/// Reads two aligned UTF-8 files, one whitespace-tokenized sequence per
/// line. Pairs with an empty side are dropped and counted.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<(ParallelCorpus, IngestReport)> {
    let read = |p: &Path| -> Result<Vec<String>> { BufReader::new(fs::File::open(p)?).lines().map(|l| Ok(l?)).collect() };
    let (src_lines, tgt_lines) = (read(src)?, read(tgt)?);
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Config(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            src_lines.len(),
            tgt.display(),
            tgt_lines.len()
        )));
    }
    let mut report = IngestReport::default();
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let (s, mut t) = (tokenize(s), tokenize(t));
        if s.is_empty() || t.is_empty() {
            report.dropped_empty += 1;
            continue;
        }
        if t.last().map(String::as_str) != Some(RESERVED[EOS]) {
            t.push(RESERVED[EOS].to_string());
        }
        pairs.push((s, t));
    }
    report.kept = pairs.len();
    Ok((ParallelCorpus { pairs }, report))
}

/// Writes a corpus as two aligned files (targets without the trailing `</s>`).
pub fn write_parallel(corpus: &ParallelCorpus, src: &Path, tgt: &Path) -> Result<()> {
    let mut s = fs::File::create(src)?;
    let mut t = fs::File::create(tgt)?;
    for (a, b) in &corpus.pairs {
        writeln!(s, "{}", a.join(" "))?;
        let body = b.strip_suffix(&[RESERVED[EOS].to_string()]).unwrap_or(b);
        writeln!(t, "{}", body.join(" "))?;
    }
    Ok(())
}

/// Token ↔ id map with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(words: Vec<String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("vocabulary lists '{tok}' twice")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Keeps the `cap − 4` most frequent tokens, ties broken
    /// lexicographically. Reserved surface forms are never counted.
    pub fn build<'a, I, S>(sequences: I, cap: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                let tok = tok.as_ref();
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words = ranked.into_iter().take(cap.saturating_sub(RESERVED.len())).map(|(t, _)| t.to_string()).collect();
        Self::from_tokens(words).expect("counted tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if let Some(w) = words.iter().find(|w| RESERVED.contains(&w.as_str()) || w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(Error::Config(format!("invalid vocabulary entry '{w}'")));
        }
        Self::from_tokens(words)
    }

    /// One token per line; line `n` (0-based) holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for w in self.words() {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }
}

/// One pair as ids: the target ends with `EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_corpus(corpus: &ParallelCorpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<EncodedPair> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| EncodedPair { src: src_vocab.encode(s), tgt: tgt_vocab.encode(t) })
        .collect()
}

/// Padded, masked ids for a group of pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of these pairs in the encoded corpus.
    pub indices: Vec<usize>,
    pub src: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub src_lens: Vec<usize>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub tgt_lens: Vec<usize>,
}

fn pad(seqs: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>, Vec<usize>) {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let ids = seqs.iter().map(|s| s.iter().copied().chain(std::iter::repeat(PAD)).take(width).collect()).collect();
    let mask = seqs.iter().map(|s| (0..width).map(|j| j < s.len()).collect()).collect();
    (ids, mask, seqs.iter().map(|s| s.len()).collect())
}

impl Batch {
    pub fn from_pairs(pairs: &[EncodedPair], indices: Vec<usize>) -> Self {
        let srcs: Vec<&[usize]> = indices.iter().map(|&i| pairs[i].src.as_slice()).collect();
        let tgts: Vec<&[usize]> = indices.iter().map(|&i| pairs[i].tgt.as_slice()).collect();
        let (src, src_mask, src_lens) = pad(&srcs);
        let (tgt, tgt_mask, tgt_lens) = pad(&tgts);
        Self { indices, src, src_mask, src_lens, tgt, tgt_mask, tgt_lens }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn src_width(&self) -> usize {
        self.src.first().map_or(0, Vec::len)
    }

    pub fn tgt_width(&self) -> usize {
        self.tgt.first().map_or(0, Vec::len)
    }

    /// Column `j` of the source ids.
    pub fn src_column(&self, j: usize) -> Vec<usize> {
        self.src.iter().map(|r| r[j]).collect()
    }

    pub fn src_mask_column(&self, j: usize) -> Vec<bool> {
        self.src_mask.iter().map(|r| r[j]).collect()
    }

    /// Count of real (unpadded) target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

/// Groups pairs into batches of at most `batch_size`.
///
/// Pairs whose source or target (not counting `</s>`) is longer than
/// `max_len` are dropped. With a seed, pairs are shuffled, sorted by
/// length inside windows of [`BUCKET_WINDOW`] batches, and the resulting
/// batches shuffled again; without one, corpus order is kept.
pub fn make_batches(pairs: &[EncodedPair], batch_size: usize, max_len: usize, seed: Option<u64>) -> Result<(Vec<Batch>, IngestReport)> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::Config("batch size and max length must be positive".into()));
    }
    let mut report = IngestReport::default();
    let mut keep = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let tgt_words = p.tgt.len() - usize::from(p.tgt.last() == Some(&EOS));
        if p.src.is_empty() || p.tgt.is_empty() {
            report.dropped_empty += 1;
        } else if p.src.len() > max_len || tgt_words > max_len {
            report.dropped_too_long += 1;
        } else {
            keep.push(i);
        }
    }
    report.kept = keep.len();

    let mut batches = Vec::new();
    match seed {
        None => {
            for chunk in keep.chunks(batch_size) {
                batches.push(Batch::from_pairs(pairs, chunk.to_vec()));
            }
        }
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            keep.shuffle(&mut rng);
            for window in keep.chunks_mut(batch_size * BUCKET_WINDOW) {
                window.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));
                for chunk in window.chunks(batch_size) {
                    batches.push(Batch::from_pairs(pairs, chunk.to_vec()));
                }
            }
            batches.shuffle(&mut rng);
        }
    }
    Ok((batches, report))
}

#[cfg(test)]
mod tests;
