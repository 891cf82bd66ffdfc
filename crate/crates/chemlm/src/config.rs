//! Run configuration: a flat `key = value` text file covering the model,
//! training, bucketing, and analysis knobs. Unknown keys are hard errors so
//! typos never pass silently, and the effective configuration can be echoed
//! back out in canonical form.

use thiserror::Error;

use crate::analysis::AffinityTransform;
use crate::attention::{AttentionVariant, FeatureNonlinearity};
use crate::dataset::BucketSpec;
use crate::model::EncoderConfig;
use crate::train::{FinetuneMode, Task, TrainConfig};

#[derive(Debug, Error, PartialEq, Clone)]
pub enum ConfigError {
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("malformed line {line}: `{text}` (expected `key = value`)")]
    BadLine { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything a run needs, with CLI-overridable fields.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub buckets: BucketSpec,
    /// Layer whose attention map the analysis command reads.
    pub analysis_layer: usize,
    /// Longest sequence the analysis mode will materialize an N x N map for.
    pub analysis_cap: usize,
    pub affinity: AffinityTransform,
    /// Decay length (angstroms) used when `affinity` is the exp transform.
    pub affinity_d0: f64,
    /// Fine-tune head hidden width; 0 means "use the encoder hidden size".
    pub head_hidden: usize,
    pub task: Task,
    pub finetune_mode: FinetuneMode,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            // vocab_size is filled in from the vocabulary file at run time
            encoder: EncoderConfig::toy(0),
            train: TrainConfig::default(),
            buckets: BucketSpec::default(),
            analysis_layer: 1,
            analysis_cap: 256,
            affinity: AffinityTransform::default(),
            affinity_d0: 2.0,
            head_hidden: 0,
            task: Task::Regression,
            finetune_mode: FinetuneMode::Frozen,
            threads: 1,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

impl RunConfig {
    /// Apply one `key = value` assignment. Returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "preset" => match value {
                "toy" => {
                    let vocab = self.encoder.vocab_size;
                    self.encoder = EncoderConfig::toy(vocab);
                }
                "xl" => {
                    let vocab = self.encoder.vocab_size;
                    self.encoder = EncoderConfig::xl(vocab);
                }
                _ => return Err(bad(key, value, "expected `toy` or `xl`")),
            },
            "layers" => self.encoder.layers = parse_num(key, value)?,
            "heads" => self.encoder.heads = parse_num(key, value)?,
            "hidden" => self.encoder.hidden = parse_num(key, value)?,
            "ffn" => self.encoder.ffn = parse_num(key, value)?,
            "variant" => {
                self.encoder.variant = AttentionVariant::parse(value).ok_or_else(|| {
                    bad(key, value, "expected full_absolute | full_rotary | linear_rotary_original | linear_rotary_modified")
                })?;
            }
            "dropout" => self.encoder.dropout = parse_num(key, value)?,
            "max_positions" => self.encoder.max_positions = parse_num(key, value)?,
            "feature_dim" => self.encoder.feature_dim = parse_num(key, value)?,
            "feature_nonlinearity" => {
                self.encoder.feature_nonlinearity = FeatureNonlinearity::parse(value)
                    .ok_or_else(|| bad(key, value, "expected relu | elu1"))?;
            }
            "scale_scores" => {
                self.encoder.scale_scores =
                    value.parse().map_err(|_| bad(key, value, "expected true | false"))?;
            }
            "seed" => {
                let s: u64 = parse_num(key, value)?;
                self.encoder.seed = s;
                self.train.seed = s;
            }
            "lr" => self.train.lr = parse_num(key, value)?,
            "finetune_lr" => self.train.finetune_lr = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "eval_every" => self.train.eval_every = parse_num(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, value)?,
            "eval_samples" => self.train.eval_samples = parse_num(key, value)?,
            "select_p" => self.train.select_p = parse_num(key, value)?,
            "beta1" => self.train.beta1 = parse_num(key, value)?,
            "beta2" => self.train.beta2 = parse_num(key, value)?,
            "eps" => self.train.eps = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "trust_clamp" => self.train.trust_clamp = parse_num(key, value)?,
            "bucket_boundaries" => {
                let mut bounds = Vec::new();
                for part in value.split(',') {
                    let (lo, hi) = part
                        .split_once('-')
                        .ok_or_else(|| bad(key, value, format!("interval `{part}` is not lo-hi")))?;
                    bounds.push((
                        parse_num::<usize>(key, lo.trim())?,
                        parse_num::<usize>(key, hi.trim())?,
                    ));
                }
                self.buckets.boundaries = bounds;
            }
            "bucket_min_emit" => {
                let mut mins = Vec::new();
                for part in value.split(',') {
                    mins.push(parse_num::<usize>(key, part.trim())?);
                }
                self.buckets.min_emit = mins;
            }
            "analysis_layer" => self.analysis_layer = parse_num(key, value)?,
            "analysis_cap" => self.analysis_cap = parse_num(key, value)?,
            "affinity" => {
                self.affinity = match AffinityTransform::parse(value)
                    .ok_or_else(|| bad(key, value, "expected exp | inv | binary"))?
                {
                    AffinityTransform::ExpDecay { .. } => {
                        AffinityTransform::ExpDecay { d0: self.affinity_d0 }
                    }
                    other => other,
                };
            }
            "affinity_d0" => {
                let d0: f64 = parse_num(key, value)?;
                if d0 <= 0.0 {
                    return Err(bad(key, value, "must be positive"));
                }
                self.affinity_d0 = d0;
                if let AffinityTransform::ExpDecay { .. } = self.affinity {
                    self.affinity = AffinityTransform::ExpDecay { d0 };
                }
            }
            "head_hidden" => self.head_hidden = parse_num(key, value)?,
            "task" => {
                self.task = Task::parse(value)
                    .ok_or_else(|| bad(key, value, "expected regression | classification"))?;
            }
            "finetune_mode" => {
                self.finetune_mode = match value {
                    "frozen" => FinetuneMode::Frozen,
                    "finetuned" => FinetuneMode::Finetuned,
                    _ => return Err(bad(key, value, "expected frozen | finetuned")),
                };
            }
            "threads" => {
                self.threads = parse_num(key, value)?;
                if self.threads == 0 {
                    return Err(bad(key, value, "must be at least 1"));
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parse a config file body. Every unknown key is collected and reported.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_lines(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current configuration.
    pub fn apply_lines(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut unknown = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine { line: lineno + 1, text: raw.to_string() })?;
            let key = key.trim();
            let value = value.trim();
            if !self.apply(key, value)? {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        Ok(())
    }

    /// Apply `key=value` override strings (CLI `--set`).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<(), ConfigError> {
        let mut unknown = Vec::new();
        for pair in pairs {
            let raw = pair.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine { line: 0, text: raw.to_string() })?;
            if !self.apply(key.trim(), value.trim())? {
                unknown.push(key.trim().to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        Ok(())
    }

    /// Cross-field validation beyond per-key parsing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.buckets.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.lr < 0.0 || self.train.finetune_lr < 0.0 {
            return Err(ConfigError::Invalid("learning rates must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.train.select_p) {
            return Err(ConfigError::Invalid("select_p must be in [0, 1]".into()));
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering of the effective configuration.
    pub fn echo(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let bounds = self
            .buckets
            .boundaries
            .iter()
            .map(|(lo, hi)| format!("{lo}-{hi}"))
            .collect::<Vec<_>>()
            .join(",");
        let mins = self
            .buckets
            .min_emit
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "layers = {}\nheads = {}\nhidden = {}\nffn = {}\nvariant = {}\ndropout = {}\n\
             max_positions = {}\nfeature_dim = {}\nfeature_nonlinearity = {}\nscale_scores = {}\n\
             seed = {}\nlr = {}\nfinetune_lr = {}\nbatch_size = {}\nepochs = {}\neval_every = {}\n\
             checkpoint_every = {}\neval_samples = {}\nselect_p = {}\nbeta1 = {}\nbeta2 = {}\n\
             eps = {}\nweight_decay = {}\ntrust_clamp = {}\nbucket_boundaries = {}\n\
             bucket_min_emit = {}\nanalysis_layer = {}\nanalysis_cap = {}\naffinity = {}\n\
             affinity_d0 = {}\nhead_hidden = {}\ntask = {}\nfinetune_mode = {}\nthreads = {}\n",
            e.layers,
            e.heads,
            e.hidden,
            e.ffn,
            e.variant.name(),
            e.dropout,
            e.max_positions,
            e.feature_dim,
            e.feature_nonlinearity.name(),
            e.scale_scores,
            t.seed,
            t.lr,
            t.finetune_lr,
            t.batch_size,
            t.epochs,
            t.eval_every,
            t.checkpoint_every,
            t.eval_samples,
            t.select_p,
            t.beta1,
            t.beta2,
            t.eps,
            t.weight_decay,
            t.trust_clamp,
            bounds,
            mins,
            self.analysis_layer,
            self.analysis_cap,
            self.affinity.name(),
            self.affinity_d0,
            self.head_hidden,
            match self.task {
                Task::Regression => "regression",
                Task::Classification => "classification",
            },
            match self.finetune_mode {
                FinetuneMode::Frozen => "frozen",
                FinetuneMode::Finetuned => "finetuned",
            },
            self.threads,
        )
    }
}
