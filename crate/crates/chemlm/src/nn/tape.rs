//! Reverse-mode differentiation on an operation tape.
//!
//! Each forward op appends a node (shape, value, op record) to the tape;
//! node inputs always precede the node itself, so the backward pass walks the
//! arena once in reverse, accumulating gradients additively. Inputs are copied
//! onto the tape when recorded, which keeps leaves immune to later mutation of
//! the source tensors.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use thiserror::Error;

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum NnError {
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: String },
    #[error("loss mask selects no position")]
    EmptyLossMask,
    #[error("attention row {row} has no unmasked key")]
    AllMasked { row: usize },
    #[error("dimension {0} must be even for paired rotation")]
    OddDim(usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddBias { x: usize, bias: usize },
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    MatmulTN { a: usize, b: usize },
    Gelu(usize),
    Relu(usize),
    Elu1(usize),
    SumAll(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { x: usize },
    Dropout { x: usize, mask: Vec<F> },
    Embedding { table: usize, ids: Vec<u32> },
    Rotate { x: usize, cos: Vec<F>, sin: Vec<F> },
    DivByCol { num: usize, den: usize, eps: F },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    CrossEntropyMasked {
        logits: usize,
        labels: Vec<u32>,
        mask: Vec<u8>,
        lse: Vec<F>,
        n_selected: usize,
    },
}

/// Exact-CDF GELU: `x * Phi(x)` with the Gaussian CDF from `erf`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
    checked: bool,
    poisoned: Option<String>,
    ran_backward: bool,
}

impl<F: Scalar> std::fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("checked", &self.checked)
            .field("poisoned", &self.poisoned)
            .field("ran_backward", &self.ran_backward)
            .finish()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), checked: false, poisoned: None, ran_backward: false }
    }

    /// A tape that scans every op output for NaN/Inf.
    pub fn new_checked() -> Self {
        Tape { checked: true, ..Self::new() }
    }

    /// First non-finite-producing op, if the tape is checked and one occurred.
    pub fn check_finite(&self) -> Result<(), NnError> {
        match &self.poisoned {
            Some(op) => Err(NnError::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool, name: &str) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.checked && self.poisoned.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.poisoned = Some(name.to_owned());
        }
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 2, "expected a 2-d operand, got shape {s:?}");
        (s[0], s[1])
    }

    // ---- graph inputs -------------------------------------------------

    /// Record a differentiable leaf (a parameter or checked input).
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true, "leaf")
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, "constant")
    }

    // ---- elementwise and structural ops --------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a.0, b.0), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Sub(a.0, b.0), needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a.0, b.0), needs, "mul")
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.data(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Scale(a.0, c), needs, "scale")
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, d) = self.dims2(x);
        assert_eq!(self.data(bias).len(), d, "bias length must match columns");
        let xb = self.data(x);
        let bb = self.data(bias);
        let mut value = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                value.push(xb[r * d + c] + bb[c]);
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(vec![n, d], value, Op::AddBias { x: x.0, bias: bias.0 }, needs, "add_bias")
    }

    /// `a @ b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims disagree");
        let mut out = vec![F::zero(); m * n];
        mm_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }, needs, "matmul")
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt inner dims disagree");
        let mut out = vec![F::zero(); m * n];
        mm_nt_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatmulNT { a: a.0, b: b.0 }, needs, "matmul_nt")
    }

    /// `a^T @ b` for `a: [k,m]`, `b: [k,n]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (k, m) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul_tn inner dims disagree");
        let mut out = vec![F::zero(); m * n];
        mm_tn_acc(self.data(a), self.data(b), k, m, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatmulTN { a: a.0, b: b.0 }, needs, "matmul_tn")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.data(x).iter().map(|&v| F::from_f64(gelu_scalar(v.as_f64()))).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Gelu(x.0), needs, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.data(x).iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Relu(x.0), needs, "relu")
    }

    /// `elu(x) + 1`: smooth, strictly positive.
    pub fn elu1(&mut self, x: Var) -> Var {
        let value = self
            .data(x)
            .iter()
            .map(|&v| if v > F::zero() { v + F::one() } else { v.exp() })
            .collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Elu1(x.0), needs, "elu1")
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(vec![1], vec![acc], Op::SumAll(x.0), needs, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let s = self.sum_all(x);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    /// Layer normalization over the last axis of a 2-d tensor, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let (n, d) = self.dims2(x);
        assert_eq!(self.data(gain).len(), d, "gain length must match columns");
        assert_eq!(self.data(bias).len(), d, "bias length must match columns");
        let xb = self.data(x);
        let gb = self.data(gain);
        let bb = self.data(bias);
        let mut value = vec![F::zero(); n * d];
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        let inv_d = F::from_f64(1.0 / d as f64);
        for r in 0..n {
            let row = &xb[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = F::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                value[r * d + c] = gb[c] * xh + bb[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            vec![n, d],
            value,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd },
            needs,
            "layer_norm",
        )
    }

    /// Row softmax with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None).expect("unmasked softmax cannot fail")
    }

    /// Row softmax where columns with `key_mask == 0` receive zero weight.
    pub fn softmax_masked(&mut self, x: Var, key_mask: Option<&[u8]>) -> Result<Var, NnError> {
        let (n, d) = self.dims2(x);
        if let Some(m) = key_mask {
            assert_eq!(m.len(), d, "key mask length must match columns");
        }
        let xb = self.data(x);
        let mut value = vec![F::zero(); n * d];
        for r in 0..n {
            let row = &xb[r * d..(r + 1) * d];
            let mut max = F::neg_infinity();
            for c in 0..d {
                if key_mask.map_or(true, |m| m[c] == 1) && row[c] > max {
                    max = row[c];
                }
            }
            if max == F::neg_infinity() {
                return Err(NnError::AllMasked { row: r });
            }
            let mut sum = F::zero();
            for c in 0..d {
                if key_mask.map_or(true, |m| m[c] == 1) {
                    let e = (row[c] - max).exp();
                    value[r * d + c] = e;
                    sum += e;
                }
            }
            let inv = sum.recip();
            for c in 0..d {
                value[r * d + c] = value[r * d + c] * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, d], value, Op::Softmax { x: x.0 }, needs, "softmax"))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` at train time.
    /// `p == 0` is a no-op and records nothing.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0,1)");
        if p == 0.0 {
            return x;
        }
        let scale = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { scale })
            .collect();
        let value = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Dropout { x: x.0, mask }, needs, "dropout")
    }

    /// Gather rows of `table: [V, H]` by id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let (v, h) = self.dims2(table);
        let tb = self.data(table);
        let mut value = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "id {id} out of range for table with {v} rows");
            value.extend_from_slice(&tb[id * h..(id + 1) * h]);
        }
        let needs = self.needs(table);
        self.push(
            vec![ids.len(), h],
            value,
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            needs,
            "embedding",
        )
    }

    /// Rotate each consecutive value pair of every row by a per-pair angle
    /// given as flat `cos`/`sin` buffers of length `rows * cols / 2`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Vec<F>, sin: Vec<F>) -> Var {
        let (n, d) = self.dims2(x);
        assert!(d % 2 == 0, "rotation needs an even column count");
        assert_eq!(cos.len(), n * d / 2, "cos buffer length mismatch");
        assert_eq!(sin.len(), n * d / 2, "sin buffer length mismatch");
        let xb = self.data(x);
        let half = d / 2;
        let mut value = vec![F::zero(); n * d];
        for r in 0..n {
            for p in 0..half {
                let c = cos[r * half + p];
                let s = sin[r * half + p];
                let x0 = xb[r * d + 2 * p];
                let x1 = xb[r * d + 2 * p + 1];
                value[r * d + 2 * p] = c * x0 - s * x1;
                value[r * d + 2 * p + 1] = s * x0 + c * x1;
            }
        }
        let needs = self.needs(x);
        self.push(vec![n, d], value, Op::Rotate { x: x.0, cos, sin }, needs, "rotate")
    }

    /// `num[i, j] / (den[i, 0] + eps)` with `den: [n, 1]`.
    pub fn div_by_col(&mut self, num: Var, den: Var, eps: F) -> Var {
        let (n, d) = self.dims2(num);
        let (n2, one) = self.dims2(den);
        assert_eq!(n, n2, "div_by_col row mismatch");
        assert_eq!(one, 1, "den must be a column vector");
        let nb = self.data(num);
        let db = self.data(den);
        let mut value = vec![F::zero(); n * d];
        for r in 0..n {
            let inv = (db[r] + eps).recip();
            for c in 0..d {
                value[r * d + c] = nb[r * d + c] * inv;
            }
        }
        let needs = self.needs(num) || self.needs(den);
        self.push(vec![n, d], value, Op::DivByCol { num: num.0, den: den.0, eps }, needs, "div_by_col")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.dims2(x);
        assert!(start + len <= n, "row slice out of bounds");
        let value = self.data(x)[start * d..(start + len) * d].to_vec();
        let needs = self.needs(x);
        self.push(vec![len, d], value, Op::SliceRows { x: x.0, start }, needs, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.dims2(x);
        assert!(start + len <= d, "column slice out of bounds");
        let xb = self.data(x);
        let mut value = Vec::with_capacity(n * len);
        for r in 0..n {
            value.extend_from_slice(&xb[r * d + start..r * d + start + len]);
        }
        let needs = self.needs(x);
        self.push(vec![n, len], value, Op::SliceCols { x: x.0, start }, needs, "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let d = self.dims2(parts[0]).1;
        let mut value = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for &p in parts {
            let (n, dp) = self.dims2(p);
            assert_eq!(dp, d, "concat_rows column mismatch");
            rows += n;
            needs |= self.needs(p);
            value.extend_from_slice(self.data(p));
        }
        self.push(
            vec![rows, d],
            value,
            Op::ConcatRows { parts: parts.iter().map(|v| v.0).collect() },
            needs,
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let n = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (np, dp) = self.dims2(p);
                assert_eq!(np, n, "concat_cols row mismatch");
                dp
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(n * total);
        for r in 0..n {
            for (i, &p) in parts.iter().enumerate() {
                let d = widths[i];
                value.extend_from_slice(&self.data(p)[r * d..(r + 1) * d]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            vec![n, total],
            value,
            Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect() },
            needs,
            "concat_cols",
        )
    }

    /// Mean negative log-likelihood over positions with `mask == 1`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        labels: &[u32],
        mask: &[u8],
    ) -> Result<Var, NnError> {
        let (n, v) = self.dims2(logits);
        assert_eq!(labels.len(), n, "one label per logit row");
        assert_eq!(mask.len(), n, "one mask entry per logit row");
        let n_selected = mask.iter().filter(|&&m| m == 1).count();
        if n_selected == 0 {
            return Err(NnError::EmptyLossMask);
        }
        let lb = self.data(logits);
        let mut lse = vec![F::zero(); n];
        let mut loss = F::zero();
        for r in 0..n {
            if mask[r] == 0 {
                continue;
            }
            let row = &lb[r * v..(r + 1) * v];
            let mut max = F::neg_infinity();
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = F::zero();
            for &x in row {
                sum += (x - max).exp();
            }
            let l = max + sum.ln();
            lse[r] = l;
            let label = labels[r] as usize;
            assert!(label < v, "label {label} out of range");
            loss += l - row[label];
        }
        loss = loss * F::from_f64(1.0 / n_selected as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropyMasked {
                logits: logits.0,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                lse,
                n_selected,
            },
            needs,
            "cross_entropy_masked",
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Populate gradients of `loss` with respect to every differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        self.check_finite()?;
        assert!(!self.ran_backward, "backward may run once per tape");
        assert_eq!(self.data(loss).len(), 1, "loss must be a scalar");
        self.ran_backward = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| if n.needs_grad { vec![F::zero(); n.value.len()] } else { Vec::new() })
            .collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // loss does not depend on any differentiable leaf
        }
        self.grads[loss.0][0] = F::one();

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (earlier, rest) = self.grads.split_at_mut(i);
            let g: &[F] = &rest[0];
            let nodes = &self.nodes;
            let needs = |j: usize| nodes[j].needs_grad;
            let val = |j: usize| -> &[F] { &nodes[j].value };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if needs(*a) {
                        axpy(&mut earlier[*a], g, F::one());
                    }
                    if needs(*b) {
                        axpy(&mut earlier[*b], g, F::one());
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        axpy(&mut earlier[*a], g, F::one());
                    }
                    if needs(*b) {
                        axpy(&mut earlier[*b], g, -F::one());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let vb = val(*b);
                        for (k, gv) in g.iter().enumerate() {
                            earlier[*a][k] += *gv * vb[k];
                        }
                    }
                    if needs(*b) {
                        let va = val(*a);
                        for (k, gv) in g.iter().enumerate() {
                            earlier[*b][k] += *gv * va[k];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if needs(*a) {
                        axpy(&mut earlier[*a], g, *c);
                    }
                }
                Op::AddBias { x, bias } => {
                    let d = nodes[*bias].value.len();
                    if needs(*x) {
                        axpy(&mut earlier[*x], g, F::one());
                    }
                    if needs(*bias) {
                        let gb = &mut earlier[*bias];
                        for (k, gv) in g.iter().enumerate() {
                            gb[k % d] += *gv;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let m = nodes[*a].shape[0];
                    let k = nodes[*a].shape[1];
                    let n = nodes[*b].shape[1];
                    if needs(*a) {
                        mm_nt_acc(g, val(*b), m, n, k, &mut earlier[*a]);
                    }
                    if needs(*b) {
                        mm_tn_acc(val(*a), g, m, k, n, &mut earlier[*b]);
                    }
                }
                Op::MatmulNT { a, b } => {
                    let m = nodes[*a].shape[0];
                    let k = nodes[*a].shape[1];
                    let n = nodes[*b].shape[0];
                    if needs(*a) {
                        mm_acc(g, val(*b), m, n, k, &mut earlier[*a]);
                    }
                    if needs(*b) {
                        mm_tn_acc(g, val(*a), m, n, k, &mut earlier[*b]);
                    }
                }
                Op::MatmulTN { a, b } => {
                    let k = nodes[*a].shape[0];
                    let m = nodes[*a].shape[1];
                    let n = nodes[*b].shape[1];
                    if needs(*a) {
                        mm_nt_acc(val(*b), g, k, n, m, &mut earlier[*a]);
                    }
                    if needs(*b) {
                        mm_acc(val(*a), g, k, m, n, &mut earlier[*b]);
                    }
                }
                Op::Gelu(x) => {
                    if needs(*x) {
                        let vx = val(*x);
                        let gx = &mut earlier[*x];
                        for (k, gv) in g.iter().enumerate() {
                            gx[k] += *gv * F::from_f64(gelu_grad_scalar(vx[k].as_f64()));
                        }
                    }
                }
                Op::Relu(x) => {
                    if needs(*x) {
                        let vx = val(*x);
                        let gx = &mut earlier[*x];
                        for (k, gv) in g.iter().enumerate() {
                            if vx[k] > F::zero() {
                                gx[k] += *gv;
                            }
                        }
                    }
                }
                Op::Elu1(x) => {
                    if needs(*x) {
                        let vx = val(*x);
                        let gx = &mut earlier[*x];
                        for (k, gv) in g.iter().enumerate() {
                            let d = if vx[k] > F::zero() { F::one() } else { vx[k].exp() };
                            gx[k] += *gv * d;
                        }
                    }
                }
                Op::SumAll(x) => {
                    if needs(*x) {
                        let g0 = g[0];
                        for gx in earlier[*x].iter_mut() {
                            *gx += g0;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let d = nodes[*gain].value.len();
                    let n = nodes[*x].value.len() / d;
                    let vg = val(*gain);
                    for r in 0..n {
                        let grow = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        if needs(*x) {
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for c in 0..d {
                                let dxh = grow[c] * vg[c];
                                m1 += dxh;
                                m2 += dxh * xh[c];
                            }
                            let inv_d = F::from_f64(1.0 / d as f64);
                            m1 = m1 * inv_d;
                            m2 = m2 * inv_d;
                            let gx = &mut earlier[*x];
                            for c in 0..d {
                                let dxh = grow[c] * vg[c];
                                gx[r * d + c] += rstd[r] * (dxh - m1 - xh[c] * m2);
                            }
                        }
                        if needs(*gain) {
                            let gg = &mut earlier[*gain];
                            for c in 0..d {
                                gg[c] += grow[c] * xh[c];
                            }
                        }
                        if needs(*bias) {
                            let gb = &mut earlier[*bias];
                            for c in 0..d {
                                gb[c] += grow[c];
                            }
                        }
                    }
                }
                Op::Softmax { x } => {
                    if needs(*x) {
                        let y = &nodes[i].value;
                        let d = nodes[i].shape[1];
                        let n = nodes[i].shape[0];
                        let gx = &mut earlier[*x];
                        for r in 0..n {
                            let mut dot = F::zero();
                            for c in 0..d {
                                dot += g[r * d + c] * y[r * d + c];
                            }
                            for c in 0..d {
                                gx[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if needs(*x) {
                        let gx = &mut earlier[*x];
                        for (k, gv) in g.iter().enumerate() {
                            gx[k] += *gv * mask[k];
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if needs(*table) {
                        let h = nodes[*table].shape[1];
                        let gt = &mut earlier[*table];
                        for (row, &id) in ids.iter().enumerate() {
                            let base = id as usize * h;
                            for c in 0..h {
                                gt[base + c] += g[row * h + c];
                            }
                        }
                    }
                }
                Op::Rotate { x, cos, sin } => {
                    if needs(*x) {
                        let d = nodes[*x].shape[1];
                        let half = d / 2;
                        let n = nodes[*x].shape[0];
                        let gx = &mut earlier[*x];
                        for r in 0..n {
                            for p in 0..half {
                                let c = cos[r * half + p];
                                let s = sin[r * half + p];
                                let g0 = g[r * d + 2 * p];
                                let g1 = g[r * d + 2 * p + 1];
                                // transpose (inverse) rotation applied to the gradient
                                gx[r * d + 2 * p] += c * g0 + s * g1;
                                gx[r * d + 2 * p + 1] += -s * g0 + c * g1;
                            }
                        }
                    }
                }
                Op::DivByCol { num, den, eps } => {
                    let n = nodes[*num].shape[0];
                    let d = nodes[*num].shape[1];
                    let vd = val(*den);
                    if needs(*num) {
                        let gn = &mut earlier[*num];
                        for r in 0..n {
                            let inv = (vd[r] + *eps).recip();
                            for c in 0..d {
                                gn[r * d + c] += g[r * d + c] * inv;
                            }
                        }
                    }
                    if needs(*den) {
                        let vn = val(*num);
                        let gd = &mut earlier[*den];
                        for r in 0..n {
                            let inv = (vd[r] + *eps).recip();
                            let mut acc = F::zero();
                            for c in 0..d {
                                acc += g[r * d + c] * vn[r * d + c];
                            }
                            gd[r] -= acc * inv * inv;
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    if needs(*x) {
                        let d = nodes[*x].shape[1];
                        let gx = &mut earlier[*x];
                        for (k, gv) in g.iter().enumerate() {
                            gx[start * d + k] += *gv;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if needs(*x) {
                        let d = nodes[*x].shape[1];
                        let len = nodes[i].shape[1];
                        let n = nodes[i].shape[0];
                        let gx = &mut earlier[*x];
                        for r in 0..n {
                            for c in 0..len {
                                gx[r * d + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let d = nodes[i].shape[1];
                    let mut row = 0;
                    for &p in parts {
                        let np = nodes[p].shape[0];
                        if needs(p) {
                            axpy(&mut earlier[p], &g[row * d..(row + np) * d], F::one());
                        }
                        row += np;
                    }
                }
                Op::ConcatCols { parts } => {
                    let n = nodes[i].shape[0];
                    let total = nodes[i].shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let dp = nodes[p].shape[1];
                        if needs(p) {
                            let gp = &mut earlier[p];
                            for r in 0..n {
                                for c in 0..dp {
                                    gp[r * dp + c] += g[r * total + off + c];
                                }
                            }
                        }
                        off += dp;
                    }
                }
                Op::CrossEntropyMasked { logits, labels, mask, lse, n_selected } => {
                    if needs(*logits) {
                        let v = nodes[*logits].shape[1];
                        let n = nodes[*logits].shape[0];
                        let vl = val(*logits);
                        let g0 = g[0] * F::from_f64(1.0 / *n_selected as f64);
                        let gl = &mut earlier[*logits];
                        for r in 0..n {
                            if mask[r] == 0 {
                                continue;
                            }
                            let label = labels[r] as usize;
                            for c in 0..v {
                                let p = (vl[r * v + c] - lse[r]).exp();
                                let delta = if c == label { F::one() } else { F::zero() };
                                gl[r * v + c] += g0 * (p - delta);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last `backward` call with respect to `v`.
    ///
    /// `None` for non-differentiable nodes or before `backward` has run;
    /// a leaf that does not influence the loss gets an exact zero tensor.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        if !self.ran_backward || !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(Tensor::new(self.nodes[v.0].shape.clone(), self.grads[v.0].clone()))
    }
}

fn axpy<F: Scalar>(dst: &mut [F], src: &[F], c: F) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`.
fn mm_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`.
fn mm_nt_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a^T @ b` with `a: [k,m]`, `b: [k,n]`.
fn mm_tn_acc<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
