//! Transformer encoder, MLM head, pooled embeddings, and fine-tune heads.
//!
//! The encoder uses pre-layer-norm residual blocks with a final layer norm.
//! Padding is excluded from attention through key masks and from pooling
//! through per-row mean weights, so right-padding never changes the outputs
//! at real positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    attention_weights_full, attention_weights_linear, full_attention_on_tape,
    linear_attention_on_tape, AttentionError, AttentionMap, AttentionVariant, FeatureMap,
    FeatureNonlinearity, RotationSchedule, DENOM_EPS, ROTARY_BASE,
};
use crate::dataset::PaddedRows;
use crate::nn::{NnError, Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, MAX_FRAMED_LEN};

#[derive(Debug, Error, PartialEq, Clone)]
pub enum ModelError {
    #[error("sequence needs {needed} positions but the model allows {max}")]
    PositionOverflow { needed: usize, max: usize },
    #[error("token id {id} exceeds vocabulary size {vocab}")]
    IdOverflow { id: u32, vocab: usize },
    #[error("input width {got} does not match the expected dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("sequence length {len} exceeds the analysis cap {cap}")]
    SequenceTooLongForAnalysis { len: usize, cap: usize },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub variant: AttentionVariant,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Random feature dimension of the linear-attention kernel.
    pub feature_dim: usize,
    pub feature_nonlinearity: FeatureNonlinearity,
    /// Scale full-attention scores by `1/sqrt(head_dim)` before the exp.
    pub scale_scores: bool,
    /// Seed for weight init and the frozen feature map.
    pub seed: u64,
}

impl EncoderConfig {
    /// The large preset: 12 layers, 12 heads, 768 hidden.
    pub fn xl(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 12,
            heads: 12,
            hidden: 768,
            ffn: 768 * 4,
            variant: AttentionVariant::LinearRotaryModified,
            dropout: 0.1,
            max_positions: MAX_FRAMED_LEN,
            vocab_size,
            feature_dim: 32,
            feature_nonlinearity: FeatureNonlinearity::Relu,
            scale_scores: true,
            seed: 0,
        }
    }

    /// The toy preset: 2 layers, 2 heads, 64 hidden.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            heads: 2,
            hidden: 64,
            ffn: 256,
            variant: AttentionVariant::LinearRotaryModified,
            dropout: 0.1,
            max_positions: MAX_FRAMED_LEN,
            vocab_size,
            feature_dim: 32,
            feature_nonlinearity: FeatureNonlinearity::Relu,
            scale_scores: true,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.ffn == 0 {
            return Err(ModelError::BadConfig("layers/heads/hidden/ffn must be nonzero".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.variant.is_rotary() && self.head_dim() % 2 != 0 {
            return Err(ModelError::BadConfig(format!(
                "head dim {} must be even for rotary variants",
                self.head_dim()
            )));
        }
        if self.variant.is_linear() && self.feature_dim == 0 {
            return Err(ModelError::BadConfig("feature_dim must be nonzero".into()));
        }
        if self.variant == AttentionVariant::LinearRotaryOriginal && self.feature_dim % 2 != 0 {
            return Err(ModelError::BadConfig(format!(
                "feature_dim {} must be even to rotate feature outputs",
                self.feature_dim
            )));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::BadConfig("vocab_size must be nonzero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig("dropout must be in [0, 1)".into()));
        }
        if self.max_positions == 0 || self.max_positions > MAX_FRAMED_LEN {
            return Err(ModelError::BadConfig(format!(
                "max_positions must be in [1, {MAX_FRAMED_LEN}]"
            )));
        }
        Ok(())
    }
}

/// One named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    /// Whether weight decay applies (off for biases, norms, embeddings).
    pub decay: bool,
    /// Frozen tensors (the feature map) are saved but never updated.
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>, decay: bool, trainable: bool) {
        debug_assert!(self.get(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name: name.to_owned(), value, grad: None, decay, trainable });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<F>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> &Tensor<F> {
        &self.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn at(&self, idx: usize) -> &Param<F> {
        &self.params[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Param<F> {
        &mut self.params[idx]
    }

    /// Insert every parameter onto a tape: trainable ones as differentiable
    /// leaves when `train` is set, everything else as constants.
    pub fn insert_all(&self, tape: &mut Tape<F>, train: bool) -> Vec<(usize, Var)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let var = if train && p.trainable { tape.leaf(&p.value) } else { tape.constant(&p.value) };
                (i, var)
            })
            .collect()
    }

    /// Add `scale * grad` into each trainable parameter's accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, vars: &[(usize, Var)], scale: f64) {
        let s = F::from_f64(scale);
        for &(idx, var) in vars {
            if !self.params[idx].trainable {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                let acc = self.params[idx]
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += gv * s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = None;
        }
    }

    /// Largest absolute difference over all same-named tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        self.params
            .iter()
            .zip(other.iter())
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }
}

/// Forward-pass options.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Constant added to every position index (for shift-invariance checks).
    pub position_offset: usize,
    /// Scan every op output for NaN/Inf.
    pub checked: bool,
    /// Materialize the attention map of this layer (single-row batches only).
    pub capture_layer: Option<usize>,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts { position_offset: 0, checked: false, capture_layer: None }
    }
}

/// Train/eval switch; train mode draws dropout masks from the given stream.
pub enum Mode<'r> {
    Train { dropout_rng: &'r mut ChaCha8Rng },
    Eval,
}

/// A completed forward pass: the tape plus handles into it.
#[derive(Debug)]
pub struct Forward<F: Scalar> {
    pub tape: Tape<F>,
    /// Final hidden states, `[rows * width, hidden]`.
    pub hidden: Var,
    pub rows: usize,
    pub width: usize,
    pub param_vars: Vec<(usize, Var)>,
    pub captured: Option<AttentionMap<F>>,
}

impl<F: Scalar> Forward<F> {
    /// Final hidden states as `[rows, width, hidden]`.
    pub fn hidden_tensor(&self) -> Tensor<F> {
        let h = self.tape.shape(self.hidden)[1];
        self.tape.tensor(self.hidden).reshape(vec![self.rows, self.width, h])
    }
}

/// Encoder: configuration, learnable tensors, and frozen attention machinery.
#[derive(Debug)]
pub struct Encoder<F: Scalar> {
    pub config: EncoderConfig,
    pub params: ParamStore<F>,
    qk_sched: Option<RotationSchedule<F>>,
    feat_sched: Option<RotationSchedule<F>>,
    feature_map: Option<FeatureMap<F>>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(config: EncoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let std = 0.02;
        params.add("tok_emb", Tensor::randn(vec![config.vocab_size, h], std, &mut rng), false, true);
        if config.variant == AttentionVariant::FullAbsolute {
            params.add(
                "pos_emb",
                Tensor::randn(vec![config.max_positions, h], std, &mut rng),
                false,
                true,
            );
        }
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            params.add(&p("ln1.gain"), Tensor::full(vec![h], F::one()), false, true);
            params.add(&p("ln1.bias"), Tensor::zeros(vec![h]), false, true);
            for w in ["wq", "wk", "wv", "wo"] {
                params.add(&p(w), Tensor::randn(vec![h, h], std, &mut rng), true, true);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.add(&p(b), Tensor::zeros(vec![h]), false, true);
            }
            params.add(&p("ln2.gain"), Tensor::full(vec![h], F::one()), false, true);
            params.add(&p("ln2.bias"), Tensor::zeros(vec![h]), false, true);
            params.add(&p("ff1.w"), Tensor::randn(vec![config.ffn, h], std, &mut rng), true, true);
            params.add(&p("ff1.b"), Tensor::zeros(vec![config.ffn]), false, true);
            params.add(&p("ff2.w"), Tensor::randn(vec![h, config.ffn], std, &mut rng), true, true);
            params.add(&p("ff2.b"), Tensor::zeros(vec![h]), false, true);
        }
        params.add("final_ln.gain", Tensor::full(vec![h], F::one()), false, true);
        params.add("final_ln.bias", Tensor::zeros(vec![h]), false, true);
        params.add("mlm.w", Tensor::randn(vec![config.vocab_size, h], std, &mut rng), true, true);
        params.add("mlm.b", Tensor::zeros(vec![config.vocab_size]), false, true);

        if config.variant.is_linear() {
            let fmap = FeatureMap::<F>::new(
                config.head_dim(),
                config.feature_dim,
                config.feature_nonlinearity,
                config.seed ^ 0x666561747572_u64, // distinct stream for the frozen map
            );
            params.add("feature_map.w", fmap.weight().clone(), false, false);
        }
        Self::from_parts(config, params)
    }

    /// Assemble an encoder around existing tensors (checkpoint restore and
    /// variant hot-swap). The feature map weight, when required, must be
    /// present in the store under `feature_map.w`.
    pub fn from_parts(config: EncoderConfig, params: ParamStore<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let qk_sched = if config.variant.is_rotary() {
            Some(RotationSchedule::new(config.head_dim(), ROTARY_BASE, config.max_positions)?)
        } else {
            None
        };
        let feat_sched = if config.variant == AttentionVariant::LinearRotaryOriginal {
            Some(RotationSchedule::new(config.feature_dim, ROTARY_BASE, config.max_positions)?)
        } else {
            None
        };
        let feature_map = if config.variant.is_linear() {
            let w = params
                .get("feature_map.w")
                .ok_or_else(|| ModelError::BadConfig("missing feature_map.w tensor".into()))?;
            if w.value.shape() != [config.feature_dim, config.head_dim()] {
                return Err(ModelError::BadConfig(format!(
                    "feature_map.w shape {:?} does not match config",
                    w.value.shape()
                )));
            }
            Some(FeatureMap::from_weight(w.value.clone(), config.feature_nonlinearity, config.seed))
        } else {
            None
        };
        Ok(Encoder { config, params, qk_sched, feat_sched, feature_map })
    }

    /// Rebuild the same weights under another attention variant. Swapping in
    /// `full_absolute` is only possible when a position table already exists.
    pub fn with_variant(&self, variant: AttentionVariant) -> Result<Self, ModelError> {
        let mut config = self.config.clone();
        config.variant = variant;
        let mut params = self.params.clone();
        if variant == AttentionVariant::FullAbsolute && params.get("pos_emb").is_none() {
            return Err(ModelError::BadConfig(
                "cannot swap to full_absolute: no position table in the state".into(),
            ));
        }
        if variant.is_linear() && params.get("feature_map.w").is_none() {
            let fmap = FeatureMap::<F>::new(
                config.head_dim(),
                config.feature_dim,
                config.feature_nonlinearity,
                config.seed ^ 0x666561747572_u64,
            );
            params.add("feature_map.w", fmap.weight().clone(), false, false);
        }
        Self::from_parts(config, params)
    }

    fn pidx(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Run the encoder over a padded batch.
    pub fn encode_batch(
        &self,
        batch: &PaddedRows,
        mode: Mode<'_>,
        opts: ForwardOpts,
    ) -> Result<Forward<F>, ModelError> {
        let cfg = &self.config;
        let rows = batch.rows;
        let width = batch.width;
        if width + opts.position_offset > cfg.max_positions {
            return Err(ModelError::PositionOverflow {
                needed: width + opts.position_offset,
                max: cfg.max_positions,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::IdOverflow { id, vocab: cfg.vocab_size });
        }
        if opts.capture_layer.is_some() {
            assert_eq!(rows, 1, "attention capture expects a single-row batch");
        }

        let mut tape = if opts.checked { Tape::new_checked() } else { Tape::new() };
        let train = matches!(mode, Mode::Train { .. });
        let mut dropout_rng = match mode {
            Mode::Train { dropout_rng } => Some(dropout_rng),
            Mode::Eval => None,
        };
        let param_vars = self.params.insert_all(&mut tape, train);
        let pv = |name: &str| param_vars[self.pidx(name)].1;

        let positions: Vec<i64> =
            (0..width).map(|i| (i + opts.position_offset) as i64).collect();

        // token embeddings, plus the learned position table for the absolute variant
        let mut x = tape.embedding(pv("tok_emb"), &batch.ids);
        if cfg.variant == AttentionVariant::FullAbsolute {
            let pos_ids: Vec<u32> = (0..rows)
                .flat_map(|_| positions.iter().map(|&p| p as u32))
                .collect();
            let pos = tape.embedding(pv("pos_emb"), &pos_ids);
            x = tape.add(x, pos);
        }

        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let eps_ln = F::from_f64(1e-5);
        let mut captured: Option<AttentionMap<F>> = None;

        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let ln1 = tape.layer_norm(x, pv(&p("ln1.gain")), pv(&p("ln1.bias")), eps_ln);
            let q = tape.matmul_nt(ln1, pv(&p("wq")));
            let q = tape.add_bias(q, pv(&p("bq")));
            let k = tape.matmul_nt(ln1, pv(&p("wk")));
            let k = tape.add_bias(k, pv(&p("bk")));
            let v = tape.matmul_nt(ln1, pv(&p("wv")));
            let v = tape.add_bias(v, pv(&p("bv")));

            let mut row_outs = Vec::with_capacity(rows);
            for r in 0..rows {
                let qr = tape.slice_rows(q, r * width, width);
                let kr = tape.slice_rows(k, r * width, width);
                let vr = tape.slice_rows(v, r * width, width);
                let kmask = batch.row_mask(r);
                let mut head_outs = Vec::with_capacity(heads);
                let mut head_maps = Vec::with_capacity(heads);
                for hidx in 0..heads {
                    let qh = tape.slice_cols(qr, hidx * hd, hd);
                    let kh = tape.slice_cols(kr, hidx * hd, hd);
                    let vh = tape.slice_cols(vr, hidx * hd, hd);
                    let out = match cfg.variant {
                        AttentionVariant::FullAbsolute => full_attention_on_tape(
                            &mut tape, qh, kh, vh, kmask, &positions, None, cfg.scale_scores,
                        )?,
                        AttentionVariant::FullRotary => full_attention_on_tape(
                            &mut tape,
                            qh,
                            kh,
                            vh,
                            kmask,
                            &positions,
                            self.qk_sched.as_ref(),
                            cfg.scale_scores,
                        )?,
                        AttentionVariant::LinearRotaryOriginal
                        | AttentionVariant::LinearRotaryModified => linear_attention_on_tape(
                            &mut tape,
                            qh,
                            kh,
                            vh,
                            kmask,
                            &positions,
                            self.qk_sched.as_ref().expect("rotary schedule built"),
                            self.feat_sched.as_ref(),
                            self.feature_map.as_ref().expect("feature map built"),
                            cfg.variant == AttentionVariant::LinearRotaryModified,
                            F::from_f64(DENOM_EPS),
                        ),
                    };
                    if opts.capture_layer == Some(l) {
                        head_maps.push(self.head_weights(&tape, qh, kh, kmask, &positions)?);
                    }
                    head_outs.push(out);
                }
                if opts.capture_layer == Some(l) {
                    captured = Some(AttentionMap::from_heads(l, head_maps));
                }
                row_outs.push(tape.concat_cols(&head_outs));
            }
            let attn = tape.concat_rows(&row_outs);
            let attn = tape.matmul_nt(attn, pv(&p("wo")));
            let mut attn = tape.add_bias(attn, pv(&p("bo")));
            if train && cfg.dropout > 0.0 {
                attn = tape.dropout(attn, cfg.dropout, dropout_rng.as_deref_mut().unwrap());
            }
            x = tape.add(x, attn);

            let ln2 = tape.layer_norm(x, pv(&p("ln2.gain")), pv(&p("ln2.bias")), eps_ln);
            let f1 = tape.matmul_nt(ln2, pv(&p("ff1.w")));
            let f1 = tape.add_bias(f1, pv(&p("ff1.b")));
            let f1 = tape.gelu(f1);
            let f2 = tape.matmul_nt(f1, pv(&p("ff2.w")));
            let mut f2 = tape.add_bias(f2, pv(&p("ff2.b")));
            if train && cfg.dropout > 0.0 {
                f2 = tape.dropout(f2, cfg.dropout, dropout_rng.as_deref_mut().unwrap());
            }
            x = tape.add(x, f2);
        }
        let hidden = tape.layer_norm(x, pv("final_ln.gain"), pv("final_ln.bias"), eps_ln);
        tape.check_finite()?;

        Ok(Forward { tape, hidden, rows, width, param_vars, captured })
    }

    fn head_weights(
        &self,
        tape: &Tape<F>,
        qh: Var,
        kh: Var,
        kmask: &[u8],
        positions: &[i64],
    ) -> Result<Tensor<F>, ModelError> {
        let q = tape.tensor(qh);
        let k = tape.tensor(kh);
        let cfg = &self.config;
        let w = match cfg.variant {
            AttentionVariant::FullAbsolute => {
                attention_weights_full(&q, &k, kmask, positions, None, cfg.scale_scores)?
            }
            AttentionVariant::FullRotary => attention_weights_full(
                &q,
                &k,
                kmask,
                positions,
                self.qk_sched.as_ref(),
                cfg.scale_scores,
            )?,
            AttentionVariant::LinearRotaryOriginal | AttentionVariant::LinearRotaryModified => {
                attention_weights_linear(
                    &q,
                    &k,
                    kmask,
                    positions,
                    self.qk_sched.as_ref().expect("rotary schedule built"),
                    self.feat_sched.as_ref(),
                    self.feature_map.as_ref().expect("feature map built"),
                    cfg.variant == AttentionVariant::LinearRotaryModified,
                    F::from_f64(DENOM_EPS),
                )
            }
        };
        Ok(w)
    }

    /// Project hidden states to vocabulary logits, `[rows * width, vocab]`.
    pub fn mlm_logits(&self, fw: &mut Forward<F>) -> Var {
        let w = fw.param_vars[self.pidx("mlm.w")].1;
        let b = fw.param_vars[self.pidx("mlm.b")].1;
        let logits = fw.tape.matmul_nt(fw.hidden, w);
        fw.tape.add_bias(logits, b)
    }

    /// Masked cross-entropy over the batch's selected positions.
    pub fn mlm_loss(
        &self,
        fw: &mut Forward<F>,
        labels: &[u32],
        loss_mask: &[u8],
    ) -> Result<Var, ModelError> {
        let logits = self.mlm_logits(fw);
        Ok(fw.tape.cross_entropy_masked(logits, labels, loss_mask)?)
    }

    /// Mean of the final hidden states over real (non-pad) positions, one
    /// pooled vector per row: `[rows, hidden]`.
    pub fn pooled_hidden(&self, fw: &mut Forward<F>, batch: &PaddedRows) -> Var {
        let mut pooled = Vec::with_capacity(fw.rows);
        for r in 0..fw.rows {
            let len = batch.lengths[r];
            let mut weights = vec![F::zero(); fw.width];
            let inv = F::from_f64(1.0 / len as f64);
            for (c, w) in weights.iter_mut().enumerate().take(fw.width) {
                if batch.row_mask(r)[c] == 1 {
                    *w = inv;
                }
            }
            let wcol = Tensor::new(vec![fw.width, 1], weights);
            let wvar = fw.tape.constant(&wcol);
            let hrow = fw.tape.slice_rows(fw.hidden, r * fw.width, fw.width);
            pooled.push(fw.tape.matmul_tn(wvar, hrow));
        }
        fw.tape.concat_rows(&pooled)
    }

    /// Mean-pooled embedding of one framed sequence, `[hidden]`.
    pub fn embed_molecule(&self, seq: &TokenSequence) -> Result<Tensor<F>, ModelError> {
        let batch = PaddedRows::from_sequences(std::slice::from_ref(seq));
        let mut fw = self.encode_batch(&batch, Mode::Eval, ForwardOpts::default())?;
        let pooled = self.pooled_hidden(&mut fw, &batch);
        Ok(fw.tape.tensor(pooled).reshape(vec![self.config.hidden]))
    }

    /// Head-averaged attention weights of `layer` for one sequence.
    pub fn attention_map(
        &self,
        seq: &TokenSequence,
        layer: usize,
        analysis_cap: usize,
    ) -> Result<AttentionMap<F>, ModelError> {
        if seq.len() > analysis_cap {
            return Err(ModelError::SequenceTooLongForAnalysis { len: seq.len(), cap: analysis_cap });
        }
        assert!(layer < self.config.layers, "layer {layer} out of range");
        let batch = PaddedRows::from_sequences(std::slice::from_ref(seq));
        let opts = ForwardOpts { capture_layer: Some(layer), ..Default::default() };
        let fw = self.encode_batch(&batch, Mode::Eval, opts)?;
        Ok(fw.captured.expect("capture requested"))
    }
}

/// Two-layer fine-tuning head: affine -> GELU -> dropout -> affine.
pub struct FinetuneHead<F: Scalar> {
    pub params: ParamStore<F>,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub dropout: f64,
}

impl<F: Scalar> FinetuneHead<F> {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.add("head.w1", Tensor::randn(vec![hidden_dim, in_dim], 0.02, &mut rng), true, true);
        params.add("head.b1", Tensor::zeros(vec![hidden_dim]), false, true);
        params.add("head.w2", Tensor::randn(vec![out_dim, hidden_dim], 0.02, &mut rng), true, true);
        params.add("head.b2", Tensor::zeros(vec![out_dim]), false, true);
        FinetuneHead { params, in_dim, hidden_dim, out_dim, dropout }
    }

    /// Forward through the head given its parameters already on the tape
    /// (in store order, as produced by `ParamStore::insert_all`).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &[(usize, Var)],
        x: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let got = tape.shape(x)[1];
        if got != self.in_dim {
            return Err(ModelError::DimMismatch { expected: self.in_dim, got });
        }
        let w1 = vars[0].1;
        let b1 = vars[1].1;
        let w2 = vars[2].1;
        let b2 = vars[3].1;
        let h = tape.matmul_nt(x, w1);
        let h = tape.add_bias(h, b1);
        let mut h = tape.gelu(h);
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                h = tape.dropout(h, self.dropout, rng);
            }
        }
        let out = tape.matmul_nt(h, w2);
        Ok(tape.add_bias(out, b2))
    }

    /// Eval-mode forward on plain tensors.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.insert_all(&mut tape, false);
        let xv = tape.constant(x);
        let out = self.forward_on_tape(&mut tape, &vars, xv, None)?;
        Ok(tape.tensor(out))
    }
}
