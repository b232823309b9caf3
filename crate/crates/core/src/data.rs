//! Byte-level corpora, seeded window sampling and a synthetic copy task.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Byte vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// Percentage of the corpus held out as the evaluation suffix.
pub const EVAL_PERCENT: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    ids: Vec<u32>,
    train_len: usize,
    vocab: usize,
    digest: String,
}

impl Corpus {
    /// Byte-tokenises `bytes`; the final 5% (rounded down) is the eval split.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        let ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        let eval = ids.len() * EVAL_PERCENT / 100;
        Ok(Corpus { train_len: ids.len() - eval, ids, vocab: BYTE_VOCAB, digest: hex::encode(Sha256::digest(bytes)) })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn train(&self) -> &[u32] {
        &self.ids[..self.train_len]
    }

    pub fn eval(&self) -> &[u32] {
        &self.ids[self.train_len..]
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Hex SHA-256 of the source bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read corpus {}: {e}", path.display())))?;
    Corpus::from_bytes(&bytes)
}

/// `batch` rows of `seq_len` input ids with next-token targets, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    /// Builds a batch from contiguous windows of `seq_len + 1` ids.
    pub fn from_windows<'w>(windows: impl IntoIterator<Item = &'w [u32]>, seq_len: usize) -> Self {
        let (mut inputs, mut targets, mut batch) = (Vec::new(), Vec::new(), 0);
        for w in windows {
            debug_assert_eq!(w.len(), seq_len + 1);
            inputs.extend(w[..seq_len].iter().map(|&t| t as usize));
            targets.extend(w[1..].iter().map(|&t| t as usize));
            batch += 1;
        }
        Batch { batch, seq_len, inputs, targets }
    }

    pub fn row_inputs(&self, b: usize) -> &[usize] {
        &self.inputs[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn row_targets(&self, b: usize) -> &[usize] {
        &self.targets[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Rows `start..start+count` as their own batch.
    pub fn slice(&self, start: usize, count: usize) -> Batch {
        let (a, b) = (start * self.seq_len, (start + count) * self.seq_len);
        Batch { batch: count, seq_len: self.seq_len, inputs: self.inputs[a..b].to_vec(), targets: self.targets[a..b].to_vec() }
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// `batch` training windows whose starts depend only on `(seed, step)`.
pub fn batch_sampler(corpus: &Corpus, batch: usize, seq_len: usize, seed: u64, step: u64) -> Result<Batch> {
    let train = corpus.train();
    if train.len() <= seq_len + 1 {
        return Err(Error::Config(format!("training split of {} tokens is too short for T={seq_len}", train.len())));
    }
    let mut rng = step_rng(seed, step);
    let last_start = train.len() - seq_len - 1;
    let starts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=last_start)).collect();
    Ok(Batch::from_windows(starts.iter().map(|&s| &train[s..s + seq_len + 1]), seq_len))
}

/// Eval batch `index`: consecutive windows tiling the eval split, wrapping.
pub fn eval_batch(corpus: &Corpus, batch: usize, seq_len: usize, index: usize) -> Result<Batch> {
    let eval = corpus.eval();
    if eval.len() <= seq_len + 1 {
        return Err(Error::Config(format!("eval split of {} tokens is too short for T={seq_len}", eval.len())));
    }
    let slots = (eval.len() - 1) / seq_len;
    let starts: Vec<usize> = (0..batch).map(|b| ((index * batch + b) % slots) * seq_len).collect();
    Ok(Batch::from_windows(starts.iter().map(|&s| &eval[s..s + seq_len + 1]), seq_len))
}

/// Sequences whose second half repeats the first half.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CopyTask {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub seed: u64,
}

pub fn synthetic_copy_task(batch: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<CopyTask> {
    if seq_len < 2 || !seq_len.is_multiple_of(2) {
        return Err(Error::Config(format!("copy task needs an even T >= 2, got {seq_len}")));
    }
    if vocab < 2 {
        return Err(Error::Config(format!("copy task needs V >= 2, got {vocab}")));
    }
    Ok(CopyTask { batch, seq_len, vocab, seed })
}

impl CopyTask {
    /// Batch number `step`. The underlying sequence has period `T/2`, so the
    /// last target is the first token again.
    pub fn batch_at(&self, step: u64) -> Batch {
        let half = self.seq_len / 2;
        let mut rng = step_rng(self.seed, step);
        let mut windows: Vec<Vec<u32>> = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let prefix: Vec<u32> = (0..half).map(|_| rng.random_range(0..self.vocab as u32)).collect();
            windows.push((0..=self.seq_len).map(|t| prefix[t % half]).collect());
        }
        Batch::from_windows(windows.iter().map(Vec::as_slice), self.seq_len)
    }

    /// First position whose target is a copy of an earlier token.
    pub fn first_copy_position(&self) -> usize {
        self.seq_len / 2
    }
}

/// Supplies training batches by step and optional fixed eval batches.
pub trait BatchSource: Sync {
    fn train_batch(&self, step: u64) -> Result<Batch>;

    /// Fixed evaluation batch `index`, if the source has an eval split.
    fn eval_batch(&self, _index: usize) -> Option<Result<Batch>> {
        None
    }
}

/// Seeded corpus windows with a fixed eval set.
#[derive(Clone, Debug)]
pub struct CorpusSource<'c> {
    pub corpus: &'c Corpus,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl BatchSource for CorpusSource<'_> {
    fn train_batch(&self, step: u64) -> Result<Batch> {
        batch_sampler(self.corpus, self.batch, self.seq_len, self.seed, step)
    }

    fn eval_batch(&self, index: usize) -> Option<Result<Batch>> {
        Some(eval_batch(self.corpus, self.batch, self.seq_len, index))
    }
}

impl BatchSource for CopyTask {
    fn train_batch(&self, step: u64) -> Result<Batch> {
        Ok(self.batch_at(step))
    }

    /// Eval batches come from a stream disjoint from training steps.
    fn eval_batch(&self, index: usize) -> Option<Result<Batch>> {
        Some(Ok(self.batch_at(u64::MAX - index as u64)))
    }
}
