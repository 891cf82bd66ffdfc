//! Adaptive length bucketing, masked-token corruption, and corpus statistics.
//!
//! Minibatches are split into length buckets so that padding waste stays low;
//! underfull buckets are held back in carry queues until they reach their
//! emission threshold, and gradient accumulation weights are derived from the
//! emitted row counts.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tokenizer::{self, TokenSequence, Vocabulary, MASK_ID, MAX_FRAMED_LEN, NUM_SPECIALS, PAD_ID};

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum DatasetError {
    #[error("framed length {0} outside [1, {MAX_FRAMED_LEN}]")]
    OutOfRange(usize),
    #[error("invalid bucket spec: {0}")]
    BadSpec(String),
    #[error("vocabulary has no non-special tokens; random replacement impossible")]
    DegenerateVocab,
    #[error("no line in the corpus tokenizes successfully")]
    NoValidLines,
}

/// Inclusive length intervals and per-bucket emission thresholds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketSpec {
    /// Inclusive `(lo, hi)` framed-length intervals, sorted and disjoint.
    pub boundaries: Vec<(usize, usize)>,
    /// Minimum queued rows before a bucket emits.
    pub min_emit: Vec<usize>,
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec {
            boundaries: vec![(1, 42), (43, 66), (67, 122), (123, 202)],
            min_emit: vec![1, 1, 1, 50],
        }
    }
}

impl BucketSpec {
    /// Check that the intervals are sorted, disjoint, and jointly cover
    /// `[1, MAX_FRAMED_LEN]`, with one threshold per bucket.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.boundaries.is_empty() {
            return Err(DatasetError::BadSpec("no buckets".into()));
        }
        if self.boundaries.len() != self.min_emit.len() {
            return Err(DatasetError::BadSpec(format!(
                "{} buckets but {} min_emit entries",
                self.boundaries.len(),
                self.min_emit.len()
            )));
        }
        let mut expect = 1usize;
        for &(lo, hi) in &self.boundaries {
            if lo != expect || hi < lo {
                return Err(DatasetError::BadSpec(format!(
                    "interval [{lo},{hi}] leaves a gap or overlap at {expect}"
                )));
            }
            expect = hi + 1;
        }
        if expect != MAX_FRAMED_LEN + 1 {
            return Err(DatasetError::BadSpec(format!(
                "intervals end at {} instead of {MAX_FRAMED_LEN}",
                expect - 1
            )));
        }
        if self.min_emit.iter().any(|&m| m == 0) {
            return Err(DatasetError::BadSpec("min_emit must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_buckets(&self) -> usize {
        self.boundaries.len()
    }
}

/// Index of the interval containing `framed_length`.
pub fn assign_bucket(framed_length: usize, spec: &BucketSpec) -> Result<usize, DatasetError> {
    if framed_length == 0 || framed_length > MAX_FRAMED_LEN {
        return Err(DatasetError::OutOfRange(framed_length));
    }
    spec.boundaries
        .iter()
        .position(|&(lo, hi)| framed_length >= lo && framed_length <= hi)
        .ok_or(DatasetError::OutOfRange(framed_length))
}

/// A padded id matrix with its padding mask.
///
/// Row-major `rows x width`; `mask` is 1 at real positions and 0 at padding,
/// and no row has padding before a real id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedRows {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub rows: usize,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl PaddedRows {
    /// Pad a set of sequences to the longest one with `<pad>`.
    pub fn from_sequences(seqs: &[TokenSequence]) -> Self {
        let rows = seqs.len();
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD_ID; rows * width];
        let mut mask = vec![0u8; rows * width];
        let mut lengths = Vec::with_capacity(rows);
        for (r, seq) in seqs.iter().enumerate() {
            lengths.push(seq.len());
            for (c, &id) in seq.ids.iter().enumerate() {
                ids[r * width + c] = id;
                mask[r * width + c] = 1;
            }
        }
        PaddedRows { ids, mask, rows, width, lengths }
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.width..(r + 1) * self.width]
    }

    /// Append `extra` pad columns on the right; contents are unchanged.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let width = self.width + extra;
        let mut ids = vec![PAD_ID; self.rows * width];
        let mut mask = vec![0u8; self.rows * width];
        for r in 0..self.rows {
            for c in 0..self.width {
                ids[r * width + c] = self.ids[r * self.width + c];
                mask[r * width + c] = self.mask[r * self.width + c];
            }
        }
        PaddedRows { ids, mask, rows: self.rows, width, lengths: self.lengths.clone() }
    }
}

/// One emitted bucket: padded rows plus its gradient-accumulation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketBatch {
    pub bucket: usize,
    pub data: PaddedRows,
    /// Emitted row count divided by total rows emitted this step.
    pub accumulation_weight: f64,
}

/// All buckets emitted for one minibatch (possibly none).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BucketedBatch {
    pub buckets: Vec<BucketBatch>,
}

impl BucketedBatch {
    pub fn total_rows(&self) -> usize {
        self.buckets.iter().map(|b| b.data.rows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// Splits minibatches into length buckets, holding underfull buckets in carry
/// queues across minibatches. Single-writer: one bucketizer per training loop.
#[derive(Debug, Clone)]
pub struct Bucketizer {
    spec: BucketSpec,
    carry: Vec<Vec<TokenSequence>>,
}

impl Bucketizer {
    pub fn new(spec: BucketSpec) -> Result<Self, DatasetError> {
        spec.validate()?;
        let carry = vec![Vec::new(); spec.num_buckets()];
        Ok(Bucketizer { spec, carry })
    }

    pub fn spec(&self) -> &BucketSpec {
        &self.spec
    }

    /// Rows currently held back, per bucket.
    pub fn carry_sizes(&self) -> Vec<usize> {
        self.carry.iter().map(|q| q.len()).collect()
    }

    /// Route a minibatch into buckets and emit every bucket whose queue has
    /// reached its threshold. Rows below threshold stay queued.
    pub fn push(&mut self, minibatch: &[TokenSequence]) -> Result<BucketedBatch, DatasetError> {
        for seq in minibatch {
            let b = assign_bucket(seq.len(), &self.spec)?;
            self.carry[b].push(seq.clone());
        }
        Ok(self.emit(|queue_len, min_emit| queue_len >= min_emit))
    }

    /// Emit everything still queued, regardless of threshold. Called at epoch
    /// end so no row is dropped.
    pub fn flush(&mut self) -> BucketedBatch {
        self.emit(|queue_len, _| queue_len > 0)
    }

    fn emit(&mut self, ready: impl Fn(usize, usize) -> bool) -> BucketedBatch {
        let mut emitted: Vec<(usize, Vec<TokenSequence>)> = Vec::new();
        for b in 0..self.carry.len() {
            if ready(self.carry[b].len(), self.spec.min_emit[b]) {
                emitted.push((b, std::mem::take(&mut self.carry[b])));
            }
        }
        let total: usize = emitted.iter().map(|(_, rows)| rows.len()).sum();
        let buckets = emitted
            .into_iter()
            .map(|(bucket, rows)| BucketBatch {
                bucket,
                data: PaddedRows::from_sequences(&rows),
                accumulation_weight: rows.len() as f64 / total as f64,
            })
            .collect();
        BucketedBatch { buckets }
    }
}

/// Corrupted inputs, original labels, and the loss mask for MLM training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    /// Corrupted ids, same layout as the source batch.
    pub input: Vec<u32>,
    /// Original ids.
    pub labels: Vec<u32>,
    /// 1 at positions selected for denoising.
    pub loss_mask: Vec<u8>,
    pub rows: usize,
    pub width: usize,
}

impl MaskedBatch {
    pub fn selected_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Corrupt a padded batch for masked-language-model training.
///
/// Each non-special position is independently selected with probability
/// `select_p`; a selected position becomes `<mask>` with probability 0.8, a
/// uniformly random non-special token with probability 0.1, and keeps its
/// original id otherwise. Labels always hold the originals and the loss mask
/// marks the selected positions.
pub fn apply_mlm_corruption(
    batch: &PaddedRows,
    vocab: &Vocabulary,
    seed: u64,
    select_p: f64,
) -> Result<MaskedBatch, DatasetError> {
    if select_p > 0.0 && vocab.non_special_len() == 0 {
        return Err(DatasetError::DegenerateVocab);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = batch.ids.clone();
    let labels = batch.ids.clone();
    let mut loss_mask = vec![0u8; batch.ids.len()];
    for (i, &id) in batch.ids.iter().enumerate() {
        if (id as usize) < NUM_SPECIALS {
            continue; // specials (including padding) are never selected
        }
        if rng.random::<f64>() >= select_p {
            continue;
        }
        loss_mask[i] = 1;
        let c: f64 = rng.random();
        if c < 0.8 {
            input[i] = MASK_ID;
        } else if c < 0.9 {
            let r = rng.random_range(0..vocab.non_special_len() as u32);
            input[i] = NUM_SPECIALS as u32 + r;
        }
        // remaining 10%: keep the original id
    }
    Ok(MaskedBatch {
        input,
        labels,
        loss_mask,
        rows: batch.rows,
        width: batch.width,
    })
}

/// Corpus-wide framed-length statistics and token counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub min_len: usize,
    pub max_len: usize,
    pub mean_len: f64,
    /// Population standard deviation.
    pub std_len: f64,
    pub unique_tokens: usize,
    pub lines_ok: usize,
    pub lines_skipped: usize,
}

impl CorpusStats {
    /// Render as `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nmin_len,{}\nmax_len,{}\nmean_len,{}\nstd_len,{}\nunique_tokens,{}\nlines_ok,{}\nlines_skipped,{}\n",
            self.min_len,
            self.max_len,
            self.mean_len,
            self.std_len,
            self.unique_tokens,
            self.lines_ok,
            self.lines_skipped
        )
    }
}

/// Single streaming pass over the corpus: min/max/mean/std of framed lengths
/// (begin/end tokens included) and the count of unique tokens. Unlexable lines
/// are skipped and counted.
pub fn corpus_stats<I, S>(lines: I) -> Result<CorpusStats, DatasetError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut count = 0usize;
    let mut skipped = 0usize;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut min_len = usize::MAX;
    let mut max_len = 0usize;
    let mut unique: HashSet<String> = HashSet::new();
    for line in lines {
        match tokenizer::tokenize(line.as_ref()) {
            Ok(tokens) => {
                let framed = tokens.len() + 2;
                count += 1;
                sum += framed as f64;
                sumsq += (framed as f64) * (framed as f64);
                min_len = min_len.min(framed);
                max_len = max_len.max(framed);
                for t in tokens {
                    unique.insert(t);
                }
            }
            Err(_) => skipped += 1,
        }
    }
    if count == 0 {
        return Err(DatasetError::NoValidLines);
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(0.0);
    Ok(CorpusStats {
        min_len,
        max_len,
        mean_len: mean,
        std_len: var.sqrt(),
        unique_tokens: unique.len(),
        lines_ok: count,
        lines_skipped: skipped,
    })
}
