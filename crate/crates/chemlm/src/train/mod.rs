//! Training: the LAMB optimizer, the MLM pretraining loop with cross-bucket
//! gradient accumulation, fine-tuning in frozen and joint modes, and metrics.
//!
//! Every random stream (shuffling, corruption, dropout) is derived from the
//! root seed plus the position in training, so checkpoints only need counters
//! to resume deterministically: the data pipeline is replayed up to the saved
//! step instead of serializing carry queues.

pub mod metrics;
pub mod optim;

pub use metrics::{auc_roc, evaluate_regression, mae, rmse, RegressionMetrics};
pub use optim::{lamb_step, LambHyper, LambState};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{encoder_from_checkpoint, encoder_to_checkpoint, Checkpoint, CheckpointError, TensorRecord};
use crate::dataset::{
    apply_mlm_corruption, BucketSpec, BucketedBatch, Bucketizer, DatasetError, PaddedRows,
};
use crate::model::{Encoder, FinetuneHead, ForwardOpts, Mode, ModelError, ParamStore};
use crate::nn::{NnError, Scalar, Tensor};
use crate::tokenizer::{encode, TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("label parse error at line {line}: {message}")]
    LabelParse { line: usize, message: String },
    #[error("split section `{0}` is empty or missing")]
    EmptySplit(String),
    #[error("metric needs both classes present in the labels")]
    SingleClass,
    #[error("no usable line in the corpus")]
    NoValidLines,
    #[error("cannot resume: {0}")]
    BadResume(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

/// Loop hyperparameters. `lr` drives pretraining; `finetune_lr` the head runs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Steps between held-in evaluation rows; 0 disables them.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Sequences used for the evaluation rows.
    pub eval_samples: usize,
    pub select_p: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub trust_clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.6e-4,
            finetune_lr: 3e-5,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            eval_samples: 64,
            select_p: 0.15,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-6,
            weight_decay: 0.0,
            trust_clamp: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn pretrain_hyper(&self) -> LambHyper {
        LambHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            trust_clamp: self.trust_clamp,
        }
    }

    pub fn finetune_hyper(&self) -> LambHyper {
        LambHyper { lr: self.finetune_lr, ..self.pretrain_hyper() }
    }
}

/// Stream tags for derived seeds.
mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const MASK: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const FT_SHUFFLE: u64 = 5;
    pub const FT_DROPOUT: u64 = 6;
}

/// Deterministic per-purpose seed derivation (splitmix64 finalizer).
pub fn derive_seed(root: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = root
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ b.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// One metrics line: per-bucket rows plus an `all` aggregate per step, and
/// `eval` rows at the configured cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub bucket: String,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,bucket,loss,tokens_per_sec";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.bucket, self.loss, self.tokens_per_sec)
    }
}

/// MLM pretraining driver. Owns the encoder, optimizer state, and the data
/// pipeline position (epoch, minibatch cursor, carry queues).
pub struct Pretrainer<F: Scalar> {
    pub encoder: Encoder<F>,
    pub opt: LambState<F>,
    pub cfg: TrainConfig,
    vocab: Vocabulary,
    sequences: Vec<TokenSequence>,
    bucketizer: Bucketizer,
    pub epoch: usize,
    /// Minibatches of the current epoch already pushed into the bucketizer.
    pub cursor: usize,
    pub global_step: u64,
    pub skipped_lines: usize,
}

impl<F: Scalar> Pretrainer<F> {
    pub fn new<S: AsRef<str>>(
        encoder: Encoder<F>,
        vocab: Vocabulary,
        corpus: &[S],
        cfg: TrainConfig,
        bucket_spec: BucketSpec,
    ) -> Result<Self, TrainError> {
        let mut sequences = Vec::new();
        let mut skipped = 0usize;
        for line in corpus {
            match encode(line.as_ref(), &vocab) {
                Ok(seq) => sequences.push(seq),
                Err(_) => skipped += 1,
            }
        }
        if sequences.is_empty() {
            return Err(TrainError::NoValidLines);
        }
        let opt = LambState::new(&encoder.params);
        let bucketizer = Bucketizer::new(bucket_spec)?;
        Ok(Pretrainer {
            encoder,
            opt,
            cfg,
            vocab,
            sequences,
            bucketizer,
            epoch: 0,
            cursor: 0,
            global_step: 0,
            skipped_lines: skipped,
        })
    }

    fn epoch_chunks(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, stream::SHUFFLE, epoch as u64, 0));
        order.shuffle(&mut rng);
        order.chunks(self.cfg.batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Train until the configured epoch count, streaming metrics rows into
    /// `sink` and writing cadence/final checkpoints under `checkpoint_dir`.
    pub fn run(
        &mut self,
        sink: &mut dyn FnMut(&MetricsRow),
        checkpoint_dir: Option<&Path>,
    ) -> Result<(), TrainError> {
        while self.epoch < self.cfg.epochs {
            let chunks = self.epoch_chunks(self.epoch);
            while self.cursor < chunks.len() {
                let seqs: Vec<TokenSequence> =
                    chunks[self.cursor].iter().map(|&i| self.sequences[i].clone()).collect();
                let emitted = self.bucketizer.push(&seqs)?;
                self.cursor += 1;
                if !emitted.is_empty() {
                    self.train_step(emitted, sink)?;
                    self.maybe_checkpoint(checkpoint_dir)?;
                }
            }
            let rest = self.bucketizer.flush();
            self.epoch += 1;
            self.cursor = 0;
            if !rest.is_empty() {
                self.train_step(rest, sink)?;
                self.maybe_checkpoint(checkpoint_dir)?;
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(&dir.join("final.mlfc"))?;
        }
        Ok(())
    }

    fn maybe_checkpoint(&self, dir: Option<&Path>) -> Result<(), TrainError> {
        if let Some(dir) = dir {
            if self.cfg.checkpoint_every > 0 && self.global_step % self.cfg.checkpoint_every as u64 == 0
            {
                self.save_checkpoint(&dir.join(format!("step_{}.mlfc", self.global_step)))?;
            }
        }
        Ok(())
    }

    fn train_step(
        &mut self,
        batch: BucketedBatch,
        sink: &mut dyn FnMut(&MetricsRow),
    ) -> Result<(), TrainError> {
        let step = self.global_step + 1;
        let started = Instant::now();
        // corrupt every emitted bucket; buckets that end up with no selected
        // position carry no gradient signal and are dropped from the step
        let mut kept = Vec::new();
        for bucket in batch.buckets {
            let seed = derive_seed(self.cfg.seed, stream::MASK, step, bucket.bucket as u64);
            let masked = apply_mlm_corruption(&bucket.data, &self.vocab, seed, self.cfg.select_p)?;
            if masked.selected_count() > 0 {
                kept.push((bucket, masked));
            }
        }
        let weight_total: f64 = kept.iter().map(|(b, _)| b.accumulation_weight).sum();
        let mut aggregate = 0.0f64;
        let mut tokens = 0usize;
        let mut rows = Vec::new();
        for (bucket, masked) in &kept {
            let weight = bucket.accumulation_weight / weight_total;
            let input = PaddedRows {
                ids: masked.input.clone(),
                mask: bucket.data.mask.clone(),
                rows: bucket.data.rows,
                width: bucket.data.width,
                lengths: bucket.data.lengths.clone(),
            };
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.cfg.seed,
                stream::DROPOUT,
                step,
                bucket.bucket as u64,
            ));
            let opts = ForwardOpts { checked: true, ..Default::default() };
            let mut fw = self.encoder.encode_batch(
                &input,
                Mode::Train { dropout_rng: &mut dropout_rng },
                opts,
            )?;
            let loss = self.encoder.mlm_loss(&mut fw, &masked.labels, &masked.loss_mask)?;
            let loss_value = fw.tape.data(loss)[0].as_f64();
            fw.tape.backward(loss)?;
            self.encoder.params.accumulate_grads(&fw.tape, &fw.param_vars, weight);
            aggregate += weight * loss_value;
            tokens += input.mask.iter().filter(|&&m| m == 1).count();
            rows.push((bucket.bucket, loss_value));
        }
        if !kept.is_empty() {
            lamb_step(&mut self.encoder.params, &mut self.opt, &self.cfg.pretrain_hyper())?;
            self.encoder.params.zero_grads();
        }
        self.global_step = step;

        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        let tps = tokens as f64 / elapsed;
        for (bucket, loss) in rows {
            sink(&MetricsRow { step, bucket: bucket.to_string(), loss, tokens_per_sec: tps });
        }
        if !kept.is_empty() {
            sink(&MetricsRow { step, bucket: "all".into(), loss: aggregate, tokens_per_sec: tps });
        }
        if self.cfg.eval_every > 0 && step % self.cfg.eval_every as u64 == 0 {
            let loss = self.eval_loss()?;
            sink(&MetricsRow { step, bucket: "eval".into(), loss, tokens_per_sec: 0.0 });
        }
        Ok(())
    }

    /// Deterministic corruption loss over the first `eval_samples` sequences.
    pub fn eval_loss(&self) -> Result<f64, TrainError> {
        let n = self.cfg.eval_samples.min(self.sequences.len()).max(1);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in self.sequences[..n].chunks(self.cfg.batch_size.max(1)) {
            let batch = PaddedRows::from_sequences(chunk);
            let seed = derive_seed(self.cfg.seed, stream::EVAL, 0, 0);
            let masked = apply_mlm_corruption(&batch, &self.vocab, seed, self.cfg.select_p)?;
            if masked.selected_count() == 0 {
                continue;
            }
            let input = PaddedRows {
                ids: masked.input.clone(),
                mask: batch.mask.clone(),
                rows: batch.rows,
                width: batch.width,
                lengths: batch.lengths.clone(),
            };
            let mut fw = self.encoder.encode_batch(&input, Mode::Eval, ForwardOpts::default())?;
            let loss = self.encoder.mlm_loss(&mut fw, &masked.labels, &masked.loss_mask)?;
            let selected = masked.selected_count();
            total += fw.tape.data(loss)[0].as_f64() * selected as f64;
            count += selected;
        }
        if count == 0 {
            return Err(TrainError::Dataset(DatasetError::NoValidLines));
        }
        Ok(total / count as f64)
    }

    /// Snapshot parameters, optimizer moments, and pipeline counters.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut ckpt = encoder_to_checkpoint(&self.encoder);
        for (idx, p) in self.encoder.params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            ckpt.tensors.push(TensorRecord::from_tensor(&format!("opt.m.{}", p.name), &self.opt.m[idx]));
            ckpt.tensors.push(TensorRecord::from_tensor(&format!("opt.v.{}", p.name), &self.opt.v[idx]));
        }
        ckpt.set_header("opt.step", self.opt.step);
        ckpt.set_header("train.epoch", self.epoch);
        ckpt.set_header("train.cursor", self.cursor);
        ckpt.set_header("train.global_step", self.global_step);
        ckpt.set_header("train.seed", self.cfg.seed);
        ckpt.set_header("train.batch_size", self.cfg.batch_size);
        ckpt.set_header(
            "bucket.boundaries",
            self.bucketizer
                .spec()
                .boundaries
                .iter()
                .map(|(lo, hi)| format!("{lo}-{hi}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        ckpt.set_header(
            "bucket.min_emit",
            self.bucketizer
                .spec()
                .min_emit
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        ckpt.save(path)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint and replay the data pipeline up to
    /// the saved cursor so carry queues match the uninterrupted run.
    pub fn resume<S: AsRef<str>>(
        ckpt: &Checkpoint,
        corpus: &[S],
        vocab: Vocabulary,
        cfg: TrainConfig,
        bucket_spec: BucketSpec,
    ) -> Result<Self, TrainError> {
        let encoder: Encoder<F> = encoder_from_checkpoint(ckpt)?;
        let header_u64 = |key: &str| -> Result<u64, TrainError> {
            ckpt.header_get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::BadResume(format!("missing or bad header `{key}`")))
        };
        let saved_seed = header_u64("train.seed")?;
        if saved_seed != cfg.seed {
            return Err(TrainError::BadResume(format!(
                "seed {} differs from checkpointed {saved_seed}",
                cfg.seed
            )));
        }
        let saved_batch = header_u64("train.batch_size")? as usize;
        if saved_batch != cfg.batch_size {
            return Err(TrainError::BadResume(format!(
                "batch size {} differs from checkpointed {saved_batch}",
                cfg.batch_size
            )));
        }
        let mut trainer = Pretrainer::new(encoder, vocab, corpus, cfg, bucket_spec)?;
        for (idx, p) in trainer.encoder.params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = ckpt
                .tensor(&format!("opt.m.{}", p.name))
                .ok_or_else(|| TrainError::BadResume(format!("missing opt.m.{}", p.name)))?;
            let v = ckpt
                .tensor(&format!("opt.v.{}", p.name))
                .ok_or_else(|| TrainError::BadResume(format!("missing opt.v.{}", p.name)))?;
            trainer.opt.m[idx] = m.to_tensor()?;
            trainer.opt.v[idx] = v.to_tensor()?;
        }
        trainer.opt.step = header_u64("opt.step")?;
        trainer.epoch = header_u64("train.epoch")? as usize;
        trainer.cursor = header_u64("train.cursor")? as usize;
        trainer.global_step = header_u64("train.global_step")?;

        // replay the current epoch's minibatches to rebuild carry state
        let chunks = trainer.epoch_chunks(trainer.epoch);
        if trainer.cursor > chunks.len() {
            return Err(TrainError::BadResume(format!(
                "cursor {} exceeds {} minibatches",
                trainer.cursor,
                chunks.len()
            )));
        }
        for c in 0..trainer.cursor {
            let seqs: Vec<TokenSequence> =
                chunks[c].iter().map(|&i| trainer.sequences[i].clone()).collect();
            trainer.bucketizer.push(&seqs)?;
        }
        Ok(trainer)
    }
}

// ---- fine-tuning ---------------------------------------------------------

/// Downstream task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    /// Binary classification with 0/1 labels; scored by AUC-ROC.
    Classification,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regression" => Some(Self::Regression),
            "classification" => Some(Self::Classification),
            _ => None,
        }
    }
}

/// Whether the encoder weights train jointly with the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Frozen,
    Finetuned,
}

/// Labeled molecules: `smiles,target1[,target2,...]` CSV with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub smiles: Vec<String>,
    pub targets: Vec<Vec<f64>>,
    pub target_names: Vec<String>,
}

impl LabeledDataset {
    pub fn parse_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| TrainError::LabelParse { line: 0, message: "empty file".into() })?;
        let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
        if cols.len() < 2 || cols[0] != "smiles" {
            return Err(TrainError::LabelParse {
                line: 0,
                message: "header must be `smiles,target1[,target2,...]`".into(),
            });
        }
        let target_names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut smiles = Vec::new();
        let mut targets = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(TrainError::LabelParse {
                    line: lineno,
                    message: format!("expected {} fields, found {}", cols.len(), fields.len()),
                });
            }
            let mut row = Vec::with_capacity(target_names.len());
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| TrainError::LabelParse {
                    line: lineno,
                    message: format!("bad number `{f}`"),
                })?;
                row.push(v);
            }
            smiles.push(fields[0].to_string());
            targets.push(row);
        }
        if smiles.is_empty() {
            return Err(TrainError::LabelParse { line: 0, message: "no data rows".into() });
        }
        Ok(LabeledDataset { smiles, targets, target_names })
    }
}

/// Zero-based index lists under `train:`, `valid:`, and `test:` sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn parse(text: &str, n_rows: usize) -> Result<Self, TrainError> {
        let mut sections: [(&str, Vec<usize>); 3] =
            [("train", Vec::new()), ("valid", Vec::new()), ("test", Vec::new())];
        let mut current: Option<usize> = None;
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_suffix(':') {
                current = sections.iter().position(|(n, _)| *n == name);
                if current.is_none() {
                    return Err(TrainError::EmptySplit(format!("unknown section `{name}`")));
                }
                continue;
            }
            let section = current
                .ok_or_else(|| TrainError::EmptySplit("indices before any section".into()))?;
            for tok in line.split_whitespace() {
                let idx: usize = tok.parse().map_err(|_| {
                    TrainError::EmptySplit(format!("bad index `{tok}` in `{}`", sections[section].0))
                })?;
                if idx >= n_rows {
                    return Err(TrainError::EmptySplit(format!(
                        "index {idx} out of range for {n_rows} rows"
                    )));
                }
                sections[section].1.push(idx);
            }
        }
        for (name, list) in &sections {
            if list.is_empty() {
                return Err(TrainError::EmptySplit(name.to_string()));
            }
        }
        let [t, v, s] = sections;
        Ok(Split { train: t.1, valid: v.1, test: s.1 })
    }
}

/// Per-epoch fine-tuning losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

/// Fine-tune outcome: the selected epoch plus test-split metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// `(metric_name, value)` rows, e.g. `rmse`/`mae` or `auc_roc`.
    pub test_metrics: Vec<(String, f64)>,
    /// Raw test predictions (per row, per target — or the positive-class
    /// score for classification).
    pub test_predictions: Vec<Vec<f64>>,
}

struct TargetScaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl TargetScaler {
    fn fit(data: &LabeledDataset, idx: &[usize]) -> Self {
        let t = data.target_names.len();
        let mut mean = vec![0.0; t];
        let mut std = vec![0.0; t];
        for &i in idx {
            for c in 0..t {
                mean[c] += data.targets[i][c];
            }
        }
        for m in mean.iter_mut() {
            *m /= idx.len() as f64;
        }
        for &i in idx {
            for c in 0..t {
                let d = data.targets[i][c] - mean[c];
                std[c] += d * d;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / idx.len() as f64).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        TargetScaler { mean, std }
    }

    fn scale(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(c, v)| (v - self.mean[c]) / self.std[c]).collect()
    }

    fn unscale(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(c, v)| v * self.std[c] + self.mean[c]).collect()
    }
}

fn rows_to_tensor<F: Scalar>(rows: &[Vec<f64>]) -> Tensor<F> {
    let n = rows.len();
    let d = rows[0].len();
    let mut data = Vec::with_capacity(n * d);
    for r in rows {
        assert_eq!(r.len(), d);
        data.extend(r.iter().map(|&v| F::from_f64(v)));
    }
    Tensor::new(vec![n, d], data)
}

/// Mean-pooled embeddings for a list of sequences, batched eval forward.
fn pooled_embeddings<F: Scalar>(
    encoder: &Encoder<F>,
    seqs: &[TokenSequence],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = PaddedRows::from_sequences(chunk);
        let mut fw = encoder.encode_batch(&batch, Mode::Eval, ForwardOpts::default())?;
        let pooled = encoder.pooled_hidden(&mut fw, &batch);
        let t = fw.tape.tensor(pooled);
        for r in 0..chunk.len() {
            out.push((0..t.cols()).map(|c| t.at(r, c).as_f64()).collect());
        }
    }
    Ok(out)
}

/// Fine-tune a head (and optionally the encoder) on a labeled dataset.
///
/// Regression targets are standardized on the train split for optimization
/// and reported in original units. The epoch with the lowest validation loss
/// supplies the final parameters.
#[allow(clippy::too_many_arguments)]
pub fn finetune<F: Scalar>(
    encoder: &mut Encoder<F>,
    vocab: &Vocabulary,
    data: &LabeledDataset,
    split: &Split,
    task: Task,
    head_hidden: usize,
    mode: FinetuneMode,
    cfg: &TrainConfig,
) -> Result<(FinetuneHead<F>, FinetuneReport), TrainError> {
    // encode every molecule up front; labeled rows must be clean
    let mut seqs = Vec::with_capacity(data.smiles.len());
    for (i, s) in data.smiles.iter().enumerate() {
        let seq = encode(s, vocab).map_err(|e| TrainError::LabelParse {
            line: i + 1,
            message: format!("unencodable SMILES `{s}`: {e}"),
        })?;
        seqs.push(seq);
    }
    let n_targets = data.target_names.len();
    let out_dim = match task {
        Task::Regression => n_targets,
        Task::Classification => {
            if n_targets != 1 {
                return Err(TrainError::LabelParse {
                    line: 0,
                    message: "classification expects a single 0/1 target column".into(),
                });
            }
            for (i, row) in data.targets.iter().enumerate() {
                if row[0] != 0.0 && row[0] != 1.0 {
                    return Err(TrainError::LabelParse {
                        line: i + 1,
                        message: format!("label {} is not 0/1", row[0]),
                    });
                }
            }
            2
        }
    };
    let scaler = match task {
        Task::Regression => Some(TargetScaler::fit(data, &split.train)),
        Task::Classification => None,
    };
    let hidden = encoder.config.hidden;
    let mut head = FinetuneHead::<F>::new(hidden, head_hidden, out_dim, 0.1, derive_seed(cfg.seed, 7, 0, 0));

    // frozen mode embeds once; joint mode re-encodes each minibatch
    let frozen_embeddings = match mode {
        FinetuneMode::Frozen => Some(pooled_embeddings(encoder, &seqs, cfg.batch_size)?),
        FinetuneMode::Finetuned => None,
    };

    let mut head_opt = LambState::new(&head.params);
    let mut enc_opt = LambState::new(&encoder.params);
    let hyper = cfg.finetune_hyper();

    let loss_for = |tape: &mut crate::nn::Tape<F>,
                    preds: crate::nn::Var,
                    idx: &[usize]|
     -> Result<crate::nn::Var, TrainError> {
        match task {
            Task::Regression => {
                let scaler = scaler.as_ref().expect("regression has a scaler");
                let targets: Vec<Vec<f64>> =
                    idx.iter().map(|&i| scaler.scale(&data.targets[i])).collect();
                let tvar = tape.constant(&rows_to_tensor::<F>(&targets));
                let diff = tape.sub(preds, tvar);
                let sq = tape.mul(diff, diff);
                Ok(tape.mean_all(sq))
            }
            Task::Classification => {
                let labels: Vec<u32> = idx.iter().map(|&i| data.targets[i][0] as u32).collect();
                let mask = vec![1u8; idx.len()];
                Ok(tape.cross_entropy_masked(preds, &labels, &mask)?)
            }
        }
    };

    // eval-mode predictions for a set of rows (original units / class logits)
    let eval_preds = |encoder: &Encoder<F>, head: &FinetuneHead<F>, idx: &[usize]| -> Result<Vec<Vec<f64>>, TrainError> {
        let x: Vec<Vec<f64>> = match &frozen_embeddings {
            Some(embs) => idx.iter().map(|&i| embs[i].clone()).collect(),
            None => {
                let selected: Vec<TokenSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
                pooled_embeddings(encoder, &selected, cfg.batch_size)?
            }
        };
        let mut preds = Vec::with_capacity(idx.len());
        for chunk in x.chunks(cfg.batch_size.max(1)) {
            let xt = rows_to_tensor::<F>(chunk);
            let p = head.forward(&xt)?;
            for r in 0..chunk.len() {
                preds.push((0..p.cols()).map(|c| p.at(r, c).as_f64()).collect::<Vec<f64>>());
            }
        }
        Ok(preds)
    };

    let eval_loss = |encoder: &Encoder<F>, head: &FinetuneHead<F>, idx: &[usize]| -> Result<f64, TrainError> {
        let preds = eval_preds(encoder, head, idx)?;
        match task {
            Task::Regression => {
                let scaler = scaler.as_ref().expect("regression has a scaler");
                let mut acc = 0.0;
                for (row, &i) in preds.iter().zip(idx) {
                    let t = scaler.scale(&data.targets[i]);
                    for (p, tv) in row.iter().zip(&t) {
                        acc += (p - tv) * (p - tv);
                    }
                }
                Ok(acc / (preds.len() * n_targets) as f64)
            }
            Task::Classification => {
                let mut acc = 0.0;
                for (row, &i) in preds.iter().zip(idx) {
                    let label = data.targets[i][0] as usize;
                    let m = row[0].max(row[1]);
                    let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
                    acc += lse - row[label];
                }
                Ok(acc / preds.len() as f64)
            }
        }
    };

    let mut best: Option<(usize, f64, ParamStore<F>, Option<ParamStore<F>>)> = None;
    let mut epochs_log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            stream::FT_SHUFFLE,
            epoch as u64,
            0,
        ));
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                stream::FT_DROPOUT,
                epoch as u64,
                bi as u64,
            ));
            match mode {
                FinetuneMode::Frozen => {
                    let embs = frozen_embeddings.as_ref().expect("frozen embeddings built");
                    let x: Vec<Vec<f64>> = chunk.iter().map(|&i| embs[i].clone()).collect();
                    let mut tape = crate::nn::Tape::new_checked();
                    let hvars = head.params.insert_all(&mut tape, true);
                    let xv = tape.constant(&rows_to_tensor::<F>(&x));
                    let preds = head.forward_on_tape(&mut tape, &hvars, xv, Some(&mut dropout_rng))?;
                    let loss = loss_for(&mut tape, preds, chunk)?;
                    train_loss += tape.data(loss)[0].as_f64();
                    batches += 1;
                    tape.backward(loss)?;
                    head.params.accumulate_grads(&tape, &hvars, 1.0);
                    lamb_step(&mut head.params, &mut head_opt, &hyper)?;
                    head.params.zero_grads();
                }
                FinetuneMode::Finetuned => {
                    let selected: Vec<TokenSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
                    let batch = PaddedRows::from_sequences(&selected);
                    let opts = ForwardOpts { checked: true, ..Default::default() };
                    let mut fw = encoder.encode_batch(
                        &batch,
                        Mode::Train { dropout_rng: &mut dropout_rng },
                        opts,
                    )?;
                    let pooled = encoder.pooled_hidden(&mut fw, &batch);
                    let hvars = head.params.insert_all(&mut fw.tape, true);
                    let preds =
                        head.forward_on_tape(&mut fw.tape, &hvars, pooled, Some(&mut dropout_rng))?;
                    let loss = loss_for(&mut fw.tape, preds, chunk)?;
                    train_loss += fw.tape.data(loss)[0].as_f64();
                    batches += 1;
                    fw.tape.backward(loss)?;
                    encoder.params.accumulate_grads(&fw.tape, &fw.param_vars, 1.0);
                    head.params.accumulate_grads(&fw.tape, &hvars, 1.0);
                    lamb_step(&mut encoder.params, &mut enc_opt, &hyper)?;
                    lamb_step(&mut head.params, &mut head_opt, &hyper)?;
                    encoder.params.zero_grads();
                    head.params.zero_grads();
                }
            }
        }
        let valid_loss = eval_loss(encoder, &head, &split.valid)?;
        epochs_log.push(EpochLog {
            epoch,
            train_loss: train_loss / batches.max(1) as f64,
            valid_loss,
        });
        let better = best.as_ref().map_or(true, |(_, bl, _, _)| valid_loss < *bl);
        if better {
            let enc_snapshot = match mode {
                FinetuneMode::Finetuned => Some(encoder.params.clone()),
                FinetuneMode::Frozen => None,
            };
            best = Some((epoch, valid_loss, head.params.clone(), enc_snapshot));
        }
    }
    let (best_epoch, best_valid_loss, head_params, enc_params) =
        best.expect("at least one epoch runs");
    head.params = head_params;
    if let Some(p) = enc_params {
        *encoder = Encoder::from_parts(encoder.config.clone(), p)?;
    }

    // test-split evaluation with the selected parameters
    let raw_preds = eval_preds(encoder, &head, &split.test)?;
    let (test_metrics, test_predictions) = match task {
        Task::Regression => {
            let scaler = scaler.as_ref().expect("regression has a scaler");
            let preds: Vec<Vec<f64>> = raw_preds.iter().map(|r| scaler.unscale(r)).collect();
            let labels: Vec<Vec<f64>> =
                split.test.iter().map(|&i| data.targets[i].clone()).collect();
            let m = evaluate_regression(&preds, &labels);
            let mut rows = vec![("rmse".to_string(), m.avg_rmse), ("mae".to_string(), m.avg_mae)];
            if n_targets > 1 {
                for (t, name) in data.target_names.iter().enumerate() {
                    rows.push((format!("rmse.{name}"), m.per_target_rmse[t]));
                    rows.push((format!("mae.{name}"), m.per_target_mae[t]));
                }
            }
            (rows, preds)
        }
        Task::Classification => {
            let scores: Vec<f64> = raw_preds
                .iter()
                .map(|r| {
                    let m = r[0].max(r[1]);
                    let e0 = (r[0] - m).exp();
                    let e1 = (r[1] - m).exp();
                    e1 / (e0 + e1)
                })
                .collect();
            let labels: Vec<u8> = split.test.iter().map(|&i| data.targets[i][0] as u8).collect();
            let auc = auc_roc(&scores, &labels)?;
            (vec![("auc_roc".to_string(), auc)], scores.iter().map(|&s| vec![s]).collect())
        }
    };

    Ok((
        head,
        FinetuneReport { best_epoch, best_valid_loss, epochs: epochs_log, test_metrics, test_predictions },
    ))
}
