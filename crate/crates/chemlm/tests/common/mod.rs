//! Shared test oracles: central finite differences, explicit O(N^2) attention
//! double sums, and a dense least-squares solver. These deliberately avoid
//! the library's accumulator/tape code paths they are used to check.

#![allow(dead_code)]

use chemlm::attention::FeatureNonlinearity;
use chemlm::nn::{Scalar, Tape, Tensor, Var};

/// Max elementwise error between tape gradients and central finite
/// differences of `build`, normalized by `max(1, |fd|, |grad|)`.
pub fn max_fd_error(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let h = 1e-4;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.data(loss).len(), 1, "loss must be scalar");
    tape.backward(loss).expect("backward");
    let grads: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).expect("leaf grad")).collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.data(loss)[0]
    };

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let g = grads[i].data()[j];
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Reduce a tensor-valued var to a scalar with a fixed random weighting so
/// every output element contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<f64>::randn(tape.shape(x).to_vec(), 1.0, &mut rng);
    let wv = tape.constant(&w);
    let prod = tape.mul(x, wv);
    tape.sum_all(prod)
}

fn rotate_rows_f64(x: &[Vec<f64>], positions: &[i64], base: f64) -> Vec<Vec<f64>> {
    let d = x[0].len();
    assert!(d % 2 == 0);
    x.iter()
        .zip(positions)
        .map(|(row, &m)| {
            let mut out = vec![0.0; d];
            for p in 0..d / 2 {
                let theta = base.powf(-2.0 * p as f64 / d as f64);
                let a = m as f64 * theta;
                let (s, c) = a.sin_cos();
                out[2 * p] = c * row[2 * p] - s * row[2 * p + 1];
                out[2 * p + 1] = s * row[2 * p] + c * row[2 * p + 1];
            }
            out
        })
        .collect()
}

fn feature_rows_f64(
    x: &[Vec<f64>],
    w: &[Vec<f64>],
    nonlin: FeatureNonlinearity,
) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            w.iter()
                .map(|wr| {
                    let z: f64 = wr.iter().zip(row).map(|(a, b)| a * b).sum();
                    match nonlin {
                        FeatureNonlinearity::Relu => z.max(0.0),
                        FeatureNonlinearity::Elu1 => {
                            if z > 0.0 {
                                z + 1.0
                            } else {
                                z.exp()
                            }
                        }
                    }
                })
                .collect()
        })
        .collect()
}

fn to_rows<F: Scalar>(t: &Tensor<F>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| (0..t.cols()).map(|c| t.at(r, c).as_f64()).collect()).collect()
}

/// Explicit double-sum evaluation of linear attention in f64.
///
/// `modified` rotates raw q/k before the feature map and shares the kernel;
/// otherwise the numerator rotates the feature outputs (dimension r) and the
/// denominator uses the unrotated features.
#[allow(clippy::too_many_arguments)]
pub fn oracle_linear_attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    key_mask: &[u8],
    positions: &[i64],
    feature_w: &Tensor<F>,
    nonlin: FeatureNonlinearity,
    base: f64,
    modified: bool,
    eps: f64,
) -> Vec<Vec<f64>> {
    let n = q.rows();
    let d = v.cols();
    let qr = to_rows(q);
    let kr = to_rows(k);
    let vr = to_rows(v);
    let wr = to_rows(feature_w);

    let (num_q, num_k, den_q, den_k) = if modified {
        let fq = feature_rows_f64(&rotate_rows_f64(&qr, positions, base), &wr, nonlin);
        let fk = feature_rows_f64(&rotate_rows_f64(&kr, positions, base), &wr, nonlin);
        (fq.clone(), fk.clone(), fq, fk)
    } else {
        let fq = feature_rows_f64(&qr, &wr, nonlin);
        let fk = feature_rows_f64(&kr, &wr, nonlin);
        let fqr = rotate_rows_f64(&fq, positions, base);
        let fkr = rotate_rows_f64(&fk, positions, base);
        (fqr, fkr, fq, fk)
    };

    let mut out = vec![vec![0.0f64; d]; n];
    for m in 0..n {
        let mut numer = vec![0.0f64; d];
        let mut denom = 0.0f64;
        for j in 0..n {
            if key_mask[j] == 0 {
                continue;
            }
            let kern_num: f64 = num_q[m].iter().zip(&num_k[j]).map(|(a, b)| a * b).sum();
            let kern_den: f64 = den_q[m].iter().zip(&den_k[j]).map(|(a, b)| a * b).sum();
            for c in 0..d {
                numer[c] += kern_num * vr[j][c];
            }
            denom += kern_den;
        }
        for c in 0..d {
            out[m][c] = numer[c] / (denom + eps);
        }
    }
    out
}

/// Explicit softmax-attention summation in f64 (no max subtraction).
pub fn oracle_full_attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    key_mask: &[u8],
    positions: &[i64],
    rotary_base: Option<f64>,
    scale_scores: bool,
) -> Vec<Vec<f64>> {
    let n = q.rows();
    let d = q.cols();
    let mut qr = to_rows(q);
    let mut kr = to_rows(k);
    let vr = to_rows(v);
    if let Some(base) = rotary_base {
        qr = rotate_rows_f64(&qr, positions, base);
        kr = rotate_rows_f64(&kr, positions, base);
    }
    let scale = if scale_scores { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut out = vec![vec![0.0f64; vr[0].len()]; n];
    for m in 0..n {
        let mut denom = 0.0f64;
        let mut numer = vec![0.0f64; vr[0].len()];
        for j in 0..n {
            if key_mask[j] == 0 {
                continue;
            }
            let score: f64 = qr[m].iter().zip(&kr[j]).map(|(a, b)| a * b).sum::<f64>() * scale;
            let w = score.exp();
            denom += w;
            for (c, nv) in numer.iter_mut().enumerate() {
                *nv += w * vr[j][c];
            }
        }
        for (c, nv) in numer.iter().enumerate() {
            out[m][c] = nv / denom;
        }
    }
    out
}

pub fn max_abs_diff_rows<F: Scalar>(t: &Tensor<F>, rows: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            worst = worst.max((t.at(r, c).as_f64() - rows[r][c]).abs());
        }
    }
    worst
}

/// Ridge regression `(X^T X + lambda I) beta = X^T y` with an intercept
/// column, solved by Gaussian elimination with partial pivoting.
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let n = x.len();
    let d = x[0].len() + 1; // intercept first
    let design: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            let mut r = Vec::with_capacity(d);
            r.push(1.0);
            r.extend_from_slice(row);
            r
        })
        .collect();
    let mut a = vec![vec![0.0f64; d]; d];
    let mut b = vec![0.0f64; d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for row in design.iter().take(n) {
                acc += row[i] * row[j];
            }
            a[i][j] = acc + if i == j { lambda } else { 0.0 };
        }
        let mut acc = 0.0;
        for (row, &yv) in design.iter().zip(y) {
            acc += row[i] * yv;
        }
        b[i] = acc;
    }
    // elimination
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let piv = a[col][col];
        assert!(piv.abs() > 1e-12, "singular normal equations");
        for row in col + 1..d {
            let f = a[row][col] / piv;
            for cc in col..d {
                a[row][cc] -= f * a[col][cc];
            }
            b[row] -= f * b[col];
        }
    }
    let mut beta = vec![0.0f64; d];
    for row in (0..d).rev() {
        let mut acc = b[row];
        for cc in row + 1..d {
            acc -= a[row][cc] * beta[cc];
        }
        beta[row] = acc / a[row][row];
    }
    beta
}

pub fn ridge_predict(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// Condensed gradient check over every differentiable op and the four
/// attention variants. Returns the worst normalized error observed.
pub fn gradcheck_all(seeds: u64) -> f64 {
    use chemlm::attention::{
        full_attention_on_tape, linear_attention_on_tape, FeatureMap, RotationSchedule,
        ROTARY_BASE,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut worst = 0.0f64;
    let mut record = |err: f64| {
        if err > worst {
            worst = err;
        }
    };
    let randn = |shape: Vec<usize>, seed: u64| -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    };

    for seed in 0..seeds {
        let n = 2 + (seed as usize % 3);
        let k = 3 + (seed as usize % 2);
        let a = randn(vec![n, k], seed);
        let b = randn(vec![n, k], seed + 10_000);

        record(max_fd_error(&[a.clone(), b.clone()], &|t, v| {
            let s1 = t.add(v[0], v[1]);
            let s2 = t.sub(s1, v[1]);
            let s3 = t.mul(s2, v[0]);
            let s4 = t.scale(s3, 0.7);
            weighted_sum(t, s4, 1)
        }));
        record(max_fd_error(&[a.clone()], &|t, v| {
            let g = t.gelu(v[0]);
            let e = t.elu1(g);
            t.mean_all(e)
        }));
        let mut ar = a.clone();
        for x in ar.data_mut() {
            if x.abs() < 1e-2 {
                *x += 0.05_f64.copysign(*x);
            }
        }
        record(max_fd_error(&[ar], &|t, v| {
            let r = t.relu(v[0]);
            weighted_sum(t, r, 2)
        }));

        let m = 2 + (seed as usize % 2);
        let w = randn(vec![k, m], seed + 20_000);
        let wt = randn(vec![m, k], seed + 30_000);
        let at = randn(vec![k, n], seed + 40_000);
        let w2 = randn(vec![k, m], seed + 45_000);
        let bias = randn(vec![m], seed + 50_000);
        record(max_fd_error(&[a.clone(), w], &|t, v| {
            let y = t.matmul(v[0], v[1]);
            weighted_sum(t, y, 3)
        }));
        record(max_fd_error(&[a.clone(), wt.clone()], &|t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            weighted_sum(t, y, 4)
        }));
        record(max_fd_error(&[at, w2], &|t, v| {
            let y = t.matmul_tn(v[0], v[1]);
            weighted_sum(t, y, 5)
        }));
        record(max_fd_error(&[a.clone(), wt, bias], &|t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            let y = t.add_bias(y, v[2]);
            weighted_sum(t, y, 6)
        }));

        let gain = randn(vec![k], seed + 60_000);
        let lbias = randn(vec![k], seed + 70_000);
        record(max_fd_error(&[a.clone(), gain, lbias], &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            weighted_sum(t, y, 7)
        }));
        record(max_fd_error(&[a.clone()], &|t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y, 8)
        }));
        let mut mask = vec![1u8; k];
        mask[seed as usize % k] = 0;
        let mask2 = mask.clone();
        record(max_fd_error(&[a.clone()], &move |t, v| {
            let y = t.softmax_masked(v[0], Some(&mask2)).unwrap();
            weighted_sum(t, y, 9)
        }));
        record(max_fd_error(&[a.clone()], &move |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = t.dropout(v[0], 0.3, &mut rng);
            weighted_sum(t, y, 10)
        }));

        let table = randn(vec![6, 3], seed + 80_000);
        record(max_fd_error(&[table], &|t, v| {
            let y = t.embedding(v[0], &[1, 5, 1]);
            weighted_sum(t, y, 11)
        }));

        let x6 = randn(vec![n, 6], seed + 90_000);
        let sched = RotationSchedule::<f64>::new(6, ROTARY_BASE, 32).unwrap();
        let positions: Vec<i64> = (0..n as i64).collect();
        let pos2 = positions.clone();
        record(max_fd_error(&[x6], &move |t, v| {
            let y = sched.rotate_on_tape(t, v[0], &pos2).unwrap();
            weighted_sum(t, y, 12)
        }));

        let num = randn(vec![n, 3], seed + 100_000);
        let mut den = randn(vec![n, 1], seed + 110_000);
        for x in den.data_mut() {
            *x = x.abs() + 0.5;
        }
        record(max_fd_error(&[num, den], &|t, v| {
            let y = t.div_by_col(v[0], v[1], 1e-6);
            weighted_sum(t, y, 13)
        }));

        record(max_fd_error(&[a.clone(), b.clone()], &|t, v| {
            let top = t.slice_rows(v[0], 0, 1);
            let cols = t.slice_cols(v[1], 1, 2);
            let cat = t.concat_cols(&[top, top]);
            let rows = t.concat_rows(&[cols, cols]);
            let s1 = weighted_sum(t, cat, 14);
            let s2 = weighted_sum(t, rows, 15);
            t.add(s1, s2)
        }));

        let logits = randn(vec![n, 5], seed + 120_000);
        let labels: Vec<u32> = (0..n as u32).map(|i| i % 5).collect();
        let lmask = vec![1u8; n];
        record(max_fd_error(&[logits], &move |t, v| {
            t.cross_entropy_masked(v[0], &labels, &lmask).unwrap()
        }));

        // the four attention variants
        let d = 4;
        let q = randn(vec![n, d], seed + 130_000);
        let kk = randn(vec![n, d], seed + 140_000);
        let vv = randn(vec![n, d], seed + 150_000);
        let inputs = [q, kk, vv];
        let km = vec![1u8; n];
        let pos: Vec<i64> = (0..n as i64).collect();
        let qk = RotationSchedule::<f64>::new(d, ROTARY_BASE, 32).unwrap();
        let fs = RotationSchedule::<f64>::new(4, ROTARY_BASE, 32).unwrap();
        let fmap = FeatureMap::<f64>::new(d, 4, chemlm::attention::FeatureNonlinearity::Elu1, seed);
        {
            let (km, pos) = (km.clone(), pos.clone());
            record(max_fd_error(&inputs, &move |t, v| {
                let y = full_attention_on_tape(t, v[0], v[1], v[2], &km, &pos, None, true).unwrap();
                weighted_sum(t, y, 16)
            }));
        }
        {
            let (km, pos, qk) = (km.clone(), pos.clone(), qk.clone());
            record(max_fd_error(&inputs, &move |t, v| {
                let y = full_attention_on_tape(t, v[0], v[1], v[2], &km, &pos, Some(&qk), true)
                    .unwrap();
                weighted_sum(t, y, 17)
            }));
        }
        {
            let (km, pos, qk, f) = (km.clone(), pos.clone(), qk.clone(), fmap.clone());
            record(max_fd_error(&inputs, &move |t, v| {
                let y =
                    linear_attention_on_tape(t, v[0], v[1], v[2], &km, &pos, &qk, None, &f, true, 1e-6);
                weighted_sum(t, y, 18)
            }));
        }
        {
            let (km, pos, qk, fs, f) = (km, pos, qk, fs, fmap);
            record(max_fd_error(&inputs, &move |t, v| {
                let y = linear_attention_on_tape(
                    t, v[0], v[1], v[2], &km, &pos, &qk, Some(&fs), &f, false, 1e-6,
                );
                weighted_sum(t, y, 19)
            }));
        }
    }
    worst
}
