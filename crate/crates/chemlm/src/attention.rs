//! Rotary position rotations, random feature maps, and attention variants.
//!
//! Four variants are supported: full softmax attention with absolute or
//! rotary positions, and linear attention in two rotary forms. The original
//! linear form rotates the feature-mapped queries/keys in its numerator while
//! its denominator uses the unrotated features, so its implied weights need
//! not sum to one. The modified form rotates the raw queries/keys before the
//! feature map and shares one kernel between numerator and denominator, which
//! makes the implied weights nonnegative with unit row sums.
//!
//! Linear attention is evaluated in O(N·r·d) through the accumulators
//! `S = sum_n phi(k_n) v_n^T` and `z = sum_n phi(k_n)`; the explicit O(N^2)
//! weight matrix is only materialized in analysis mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{NnError, Scalar, Tape, Tensor, Var};

/// Default guard added to linear-attention denominators.
pub const DENOM_EPS: f64 = 1e-6;

/// Default rotary frequency base.
pub const ROTARY_BASE: f64 = 10000.0;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum AttentionError {
    #[error("head dimension {0} must be even for rotary rotations")]
    OddHeadDim(usize),
    #[error("feature dimension {0} must be even to rotate feature outputs")]
    OddFeatureDim(usize),
    #[error("position {pos} outside the precomputed range +-{max}")]
    PositionOutOfRange { pos: i64, max: usize },
}

/// Which attention computation a model uses. All layers share one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    FullAbsolute,
    FullRotary,
    LinearRotaryOriginal,
    LinearRotaryModified,
}

impl AttentionVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_absolute" => Some(Self::FullAbsolute),
            "full_rotary" => Some(Self::FullRotary),
            "linear_rotary_original" => Some(Self::LinearRotaryOriginal),
            "linear_rotary_modified" => Some(Self::LinearRotaryModified),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FullAbsolute => "full_absolute",
            Self::FullRotary => "full_rotary",
            Self::LinearRotaryOriginal => "linear_rotary_original",
            Self::LinearRotaryModified => "linear_rotary_modified",
        }
    }

    pub fn is_rotary(&self) -> bool {
        !matches!(self, Self::FullAbsolute)
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Self::LinearRotaryOriginal | Self::LinearRotaryModified)
    }
}

/// Block-diagonal 2x2 rotation angles per position: pair `i` of position `m`
/// turns by `m * base^(-2i/dim)`. Tables are precomputed up to `max_pos`;
/// negative positions mirror through `cos(-a) = cos(a)`, `sin(-a) = -sin(a)`.
#[derive(Debug, Clone)]
pub struct RotationSchedule<F> {
    dim: usize,
    max_pos: usize,
    cos: Vec<F>, // [max_pos + 1, dim / 2]
    sin: Vec<F>,
}

impl<F: Scalar> RotationSchedule<F> {
    pub fn new(dim: usize, base: f64, max_pos: usize) -> Result<Self, AttentionError> {
        if dim % 2 != 0 || dim == 0 {
            return Err(AttentionError::OddHeadDim(dim));
        }
        let half = dim / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
            .collect();
        let mut cos = Vec::with_capacity((max_pos + 1) * half);
        let mut sin = Vec::with_capacity((max_pos + 1) * half);
        for m in 0..=max_pos {
            for &f in &inv_freq {
                let a = m as f64 * f;
                cos.push(F::from_f64(a.cos()));
                sin.push(F::from_f64(a.sin()));
            }
        }
        Ok(RotationSchedule { dim, max_pos, cos, sin })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-row cos/sin buffers for a batch of positions (flat `[len, dim/2]`).
    pub fn gather(&self, positions: &[i64]) -> Result<(Vec<F>, Vec<F>), AttentionError> {
        let half = self.dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &m in positions {
            let mag = m.unsigned_abs() as usize;
            if mag > self.max_pos {
                return Err(AttentionError::PositionOutOfRange { pos: m, max: self.max_pos });
            }
            let row = &self.cos[mag * half..(mag + 1) * half];
            cos.extend_from_slice(row);
            let row = &self.sin[mag * half..(mag + 1) * half];
            if m >= 0 {
                sin.extend_from_slice(row);
            } else {
                sin.extend(row.iter().map(|&s| -s));
            }
        }
        Ok((cos, sin))
    }

    /// Rotate rows of `x` (one position per row) on an existing tape.
    pub fn rotate_on_tape(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        positions: &[i64],
    ) -> Result<Var, AttentionError> {
        assert_eq!(tape.shape(x)[0], positions.len(), "one position per row");
        assert_eq!(tape.shape(x)[1], self.dim, "row width must equal the schedule dim");
        let (cos, sin) = self.gather(positions)?;
        Ok(tape.rotate_pairs(x, cos, sin))
    }

    /// Rotate a plain tensor: each row is rotated by the angle of its position.
    pub fn rotate(&self, x: &Tensor<F>, positions: &[i64]) -> Result<Tensor<F>, AttentionError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = self.rotate_on_tape(&mut tape, xv, positions)?;
        Ok(tape.tensor(y))
    }
}

/// Nonlinearity applied after the random projection of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureNonlinearity {
    /// `max(0, x)`: the default generalized random feature.
    Relu,
    /// `elu(x) + 1`: smooth and strictly positive.
    Elu1,
}

impl FeatureNonlinearity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "elu1" => Some(Self::Elu1),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Elu1 => "elu1",
        }
    }
}

/// Frozen random feature map `phi(x) = nonlin(W x)` with `W: [r, dim]`.
///
/// `W` is drawn once from a recorded seed, orthogonalized in blocks of up to
/// `dim` rows, rescaled to the original Gaussian row norms, and never trained.
/// Both nonlinearities keep `phi` elementwise nonnegative, which keeps linear
/// attention denominators positive.
#[derive(Debug, Clone)]
pub struct FeatureMap<F> {
    weight: Tensor<F>,
    nonlinearity: FeatureNonlinearity,
    seed: u64,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn new(dim: usize, r: usize, nonlinearity: FeatureNonlinearity, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // draw in f64 so f32 and f64 builds share the same frozen projection
        let gauss = Tensor::<f64>::randn(vec![r, dim], 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..r)
            .map(|i| gauss.data()[i * dim..(i + 1) * dim].to_vec())
            .collect();
        let norms: Vec<f64> = rows
            .iter()
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for block in (0..r).step_by(dim) {
            let end = (block + dim).min(r);
            // orthonormalize the block, then restore the Gaussian row norms
            for i in block..end {
                for j in block..i {
                    let prev = rows[j].clone();
                    let dot: f64 = rows[i].iter().zip(&prev).map(|(a, b)| a * b).sum();
                    for (x, p) in rows[i].iter_mut().zip(&prev) {
                        *x -= dot * p;
                    }
                }
                let n: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(n > 0.0, "degenerate random draw");
                for x in rows[i].iter_mut() {
                    *x /= n;
                }
            }
            for i in block..end {
                for x in rows[i].iter_mut() {
                    *x *= norms[i];
                }
            }
        }
        let data: Vec<F> = rows.into_iter().flatten().map(F::from_f64).collect();
        FeatureMap { weight: Tensor::new(vec![r, dim], data), nonlinearity, seed }
    }

    /// Build from an explicit weight matrix (tests and checkpoint restore).
    pub fn from_weight(weight: Tensor<F>, nonlinearity: FeatureNonlinearity, seed: u64) -> Self {
        assert_eq!(weight.shape().len(), 2, "feature weight must be [r, dim]");
        FeatureMap { weight, nonlinearity, seed }
    }

    pub fn weight(&self) -> &Tensor<F> {
        &self.weight
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nonlinearity(&self) -> FeatureNonlinearity {
        self.nonlinearity
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `phi(x)` for row-per-position `x: [N, dim]`, on an existing tape.
    pub fn apply_on_tape(&self, tape: &mut Tape<F>, x: Var) -> Var {
        assert_eq!(tape.shape(x)[1], self.input_dim(), "feature map input width");
        let w = tape.constant(&self.weight);
        let proj = tape.matmul_nt(x, w);
        match self.nonlinearity {
            FeatureNonlinearity::Relu => tape.relu(proj),
            FeatureNonlinearity::Elu1 => tape.elu1(proj),
        }
    }

    pub fn apply(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = self.apply_on_tape(&mut tape, xv);
        tape.tensor(y)
    }
}

fn mask_matrix<F: Scalar>(key_mask: &[u8], cols: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(key_mask.len() * cols);
    for &m in key_mask {
        let v = if m == 1 { F::one() } else { F::zero() };
        data.extend(std::iter::repeat(v).take(cols));
    }
    Tensor::new(vec![key_mask.len(), cols], data)
}

fn ones_col<F: Scalar>(n: usize) -> Tensor<F> {
    Tensor::full(vec![n, 1], F::one())
}

/// Full softmax attention on an existing tape.
///
/// `out_m = sum_n exp(<q_m, k_n>) v_n / sum_n exp(<q_m, k_n>)` over unmasked
/// keys, with queries/keys rotated first when a schedule is given and scores
/// scaled by `1/sqrt(head_dim)` when `scale_scores` is set.
pub fn full_attention_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[u8],
    positions: &[i64],
    rotary: Option<&RotationSchedule<F>>,
    scale_scores: bool,
) -> Result<Var, NnError> {
    let (q, k) = match rotary {
        Some(s) => (
            s.rotate_on_tape(tape, q, positions).expect("positions fit the schedule"),
            s.rotate_on_tape(tape, k, positions).expect("positions fit the schedule"),
        ),
        None => (q, k),
    };
    let mut scores = tape.matmul_nt(q, k);
    if scale_scores {
        let d = tape.shape(q)[1];
        scores = tape.scale(scores, F::from_f64(1.0 / (d as f64).sqrt()));
    }
    let w = tape.softmax_masked(scores, Some(key_mask))?;
    Ok(tape.matmul(w, v))
}

/// Linear attention on an existing tape.
///
/// `modified = true` rotates the raw queries/keys before the feature map and
/// uses the same kernel in numerator and denominator. `modified = false` is
/// the original form: the numerator rotates the feature outputs (via
/// `feat_sched`, over the feature dimension) while the denominator uses the
/// unrotated features.
#[allow(clippy::too_many_arguments)]
pub fn linear_attention_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[u8],
    positions: &[i64],
    qk_sched: &RotationSchedule<F>,
    feat_sched: Option<&RotationSchedule<F>>,
    fmap: &FeatureMap<F>,
    modified: bool,
    eps: F,
) -> Var {
    let n = tape.shape(q)[0];
    let maskmat = mask_matrix::<F>(key_mask, fmap.output_dim());
    let ones = ones_col::<F>(n);

    let (num_q, num_k, den_q, den_k) = if modified {
        let qr = qk_sched.rotate_on_tape(tape, q, positions).expect("positions fit the schedule");
        let kr = qk_sched.rotate_on_tape(tape, k, positions).expect("positions fit the schedule");
        let fq = fmap.apply_on_tape(tape, qr);
        let fk = fmap.apply_on_tape(tape, kr);
        let mm = tape.constant(&maskmat);
        let fk = tape.mul(fk, mm);
        (fq, fk, fq, fk)
    } else {
        let sched = feat_sched.expect("original form needs a feature-dim schedule");
        let fq = fmap.apply_on_tape(tape, q);
        let fk = fmap.apply_on_tape(tape, k);
        let mm = tape.constant(&maskmat);
        let fk = tape.mul(fk, mm);
        let fqr = sched.rotate_on_tape(tape, fq, positions).expect("positions fit the schedule");
        let fkr = sched.rotate_on_tape(tape, fk, positions).expect("positions fit the schedule");
        (fqr, fkr, fq, fk)
    };

    // S = num_k^T V: [r, d]; numerator = num_q S: [N, d]
    let s = tape.matmul_tn(num_k, v);
    let numerator = tape.matmul(num_q, s);
    // z = den_k^T 1: [r, 1]; denominator = den_q z: [N, 1]
    let onev = tape.constant(&ones);
    let z = tape.matmul_tn(den_k, onev);
    let den = tape.matmul(den_q, z);
    tape.div_by_col(numerator, den, eps)
}

/// Plain-tensor wrapper over [`full_attention_on_tape`].
pub fn full_attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    key_mask: &[u8],
    positions: &[i64],
    rotary: Option<&RotationSchedule<F>>,
    scale_scores: bool,
) -> Result<Tensor<F>, NnError> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let out = full_attention_on_tape(&mut tape, qv, kv, vv, key_mask, positions, rotary, scale_scores)?;
    Ok(tape.tensor(out))
}

/// Plain-tensor wrapper for the original linear-rotary approximation.
pub fn linear_attention_original<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    key_mask: &[u8],
    positions: &[i64],
    feat_sched: &RotationSchedule<F>,
    fmap: &FeatureMap<F>,
    eps: F,
) -> Tensor<F> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    // the qk schedule is unused in the original form; pass the feature one
    let out = linear_attention_on_tape(
        &mut tape, qv, kv, vv, key_mask, positions, feat_sched, Some(feat_sched), fmap, false, eps,
    );
    tape.tensor(out)
}

/// Plain-tensor wrapper for the modified linear-rotary form.
pub fn linear_attention_modified<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    key_mask: &[u8],
    positions: &[i64],
    qk_sched: &RotationSchedule<F>,
    fmap: &FeatureMap<F>,
    eps: F,
) -> Tensor<F> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let out =
        linear_attention_on_tape(&mut tape, qv, kv, vv, key_mask, positions, qk_sched, None, fmap, true, eps);
    tape.tensor(out)
}

/// Explicit `[N, N]` weight matrix of full attention (analysis mode).
pub fn attention_weights_full<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    key_mask: &[u8],
    positions: &[i64],
    rotary: Option<&RotationSchedule<F>>,
    scale_scores: bool,
) -> Result<Tensor<F>, NnError> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let (qv, kv) = match rotary {
        Some(s) => (
            s.rotate_on_tape(&mut tape, qv, positions).expect("positions fit the schedule"),
            s.rotate_on_tape(&mut tape, kv, positions).expect("positions fit the schedule"),
        ),
        None => (qv, kv),
    };
    let mut scores = tape.matmul_nt(qv, kv);
    if scale_scores {
        scores = tape.scale(scores, F::from_f64(1.0 / (q.cols() as f64).sqrt()));
    }
    let w = tape.softmax_masked(scores, Some(key_mask))?;
    Ok(tape.tensor(w))
}

/// Explicit `[N, N]` implied weight matrix of a linear variant (analysis
/// mode): `w_mn = kernel(m, n) / (sum_n' kernel_den(m, n') + eps)` with
/// masked keys zeroed. For the modified form the two kernels coincide, so
/// `weights @ V` reproduces the accumulator output exactly.
#[allow(clippy::too_many_arguments)]
pub fn attention_weights_linear<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    key_mask: &[u8],
    positions: &[i64],
    qk_sched: &RotationSchedule<F>,
    feat_sched: Option<&RotationSchedule<F>>,
    fmap: &FeatureMap<F>,
    modified: bool,
    eps: F,
) -> Tensor<F> {
    let n = q.rows();
    let (num_q, num_k, den_q, den_k) = if modified {
        let fq = fmap.apply(&qk_sched.rotate(q, positions).expect("positions fit the schedule"));
        let fk = fmap.apply(&qk_sched.rotate(k, positions).expect("positions fit the schedule"));
        (fq.clone(), fk.clone(), fq, fk)
    } else {
        let sched = feat_sched.expect("original form needs a feature-dim schedule");
        let fq = fmap.apply(q);
        let fk = fmap.apply(k);
        let fqr = sched.rotate(&fq, positions).expect("positions fit the schedule");
        let fkr = sched.rotate(&fk, positions).expect("positions fit the schedule");
        (fqr, fkr, fq, fk)
    };
    let r = fmap.output_dim();
    let mut weights = vec![F::zero(); n * n];
    for m in 0..n {
        let mut den = F::zero();
        for j in 0..n {
            if key_mask[j] == 0 {
                continue;
            }
            let mut acc = F::zero();
            for c in 0..r {
                acc += den_q.at(m, c) * den_k.at(j, c);
            }
            den += acc;
        }
        let inv = (den + eps).recip();
        for j in 0..n {
            if key_mask[j] == 0 {
                continue;
            }
            let mut kern = F::zero();
            for c in 0..r {
                kern += num_q.at(m, c) * num_k.at(j, c);
            }
            weights[m * n + j] = kern * inv;
        }
    }
    Tensor::new(vec![n, n], weights)
}

/// Head-averaged attention weights for one layer, analysis mode only.
#[derive(Debug, Clone)]
pub struct AttentionMap<F> {
    pub layer: usize,
    /// Mean over heads, `[N, N]`.
    pub pooled: Tensor<F>,
    /// Per-head weight matrices, each `[N, N]`.
    pub per_head: Vec<Tensor<F>>,
}

impl<F: Scalar> AttentionMap<F> {
    pub fn from_heads(layer: usize, per_head: Vec<Tensor<F>>) -> Self {
        assert!(!per_head.is_empty(), "need at least one head");
        let n = per_head[0].rows();
        let mut pooled = Tensor::zeros(vec![n, n]);
        let inv = F::from_f64(1.0 / per_head.len() as f64);
        for h in &per_head {
            for (o, &x) in pooled.data_mut().iter_mut().zip(h.data()) {
                *o += x * inv;
            }
        }
        AttentionMap { layer, pooled, per_head }
    }
}
