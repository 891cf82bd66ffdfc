//! Acceptance suite: one test per criterion, each printing a `[PASS]` line
//! with the measured numbers. Run with `cargo test --test acceptance`
//! (add `-- --nocapture` to see the lines for passing criteria).

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use chemlm::analysis::{
    attention_distance_cosine, cosine, tanimoto, AffinityTransform, DistanceCategory,
    MoleculeGeometry, NGramFingerprint,
};
use chemlm::attention::{
    attention_weights_linear, linear_attention_modified, linear_attention_original, AttentionVariant,
    FeatureMap, FeatureNonlinearity, RotationSchedule, ROTARY_BASE,
};
use chemlm::checkpoint::Checkpoint;
use chemlm::dataset::{
    apply_mlm_corruption, assign_bucket, BucketSpec, Bucketizer, PaddedRows,
};
use chemlm::model::{Encoder, EncoderConfig, ForwardOpts, Mode};
use chemlm::nn::Tensor;
use chemlm::tokenizer::{build_vocabulary, encode, Vocabulary, BOS_ID, EOS_ID, MASK_ID, NUM_SPECIALS};
use chemlm::train::{
    auc_roc, finetune, rmse, FinetuneMode, LabeledDataset, Pretrainer, Split, Task,
    TrainConfig,
};
use common::{
    gradcheck_all, max_abs_diff_rows, oracle_linear_attention, ridge_fit, ridge_predict,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pass(criterion: u32, detail: &str) {
    println!("[PASS] criterion {criterion}: {detail}");
}

fn randn32(shape: Vec<usize>, std: f64, seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn randn64(shape: Vec<usize>, std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---- shared toy fixtures ---------------------------------------------------

/// 256 molecules built from eight short motifs; every token is predictable
/// from visible context once the motif is identified.
fn overfit_corpus() -> Vec<String> {
    let motifs = ["CO", "CN", "CS", "CCO", "CCN", "CCS", "CON", "COS"];
    let mut lines = Vec::new();
    for motif in motifs {
        for reps in 2..34 {
            lines.push(motif.repeat(reps));
        }
    }
    assert_eq!(lines.len(), 256);
    lines
}

struct Trained {
    encoder: Encoder<f32>,
    vocab: Vocabulary,
    initial_loss: f64,
    final_epoch_loss: f64,
    epochs_used: usize,
    seconds: f64,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let corpus = overfit_corpus();
        let (vocab, _) = build_vocabulary(&corpus).unwrap();
        let mut ecfg = EncoderConfig::toy(vocab.len());
        ecfg.dropout = 0.0;
        ecfg.seed = 1;
        assert_eq!((ecfg.layers, ecfg.heads, ecfg.hidden), (2, 2, 64));
        assert_eq!(ecfg.variant, AttentionVariant::LinearRotaryModified);
        let enc = Encoder::new(ecfg).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 64,
            lr: 1e-2,
            seed: 1,
            ..Default::default()
        };
        let mut trainer =
            Pretrainer::new(enc, vocab.clone(), &corpus, cfg, BucketSpec::default()).unwrap();
        let started = Instant::now();
        let mut initial_loss = None;
        let mut epoch_mean = f64::INFINITY;
        let mut epochs_used = 0usize;
        while epochs_used < 200 && epoch_mean > 0.09 {
            trainer.cfg.epochs = epochs_used + 1;
            let mut losses = Vec::new();
            trainer
                .run(
                    &mut |row| {
                        if row.bucket == "all" {
                            losses.push(row.loss);
                        }
                    },
                    None,
                )
                .unwrap();
            if initial_loss.is_none() {
                initial_loss = losses.first().copied();
            }
            epoch_mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            epochs_used += 1;
        }
        Trained {
            encoder: trainer.encoder,
            vocab,
            initial_loss: initial_loss.expect("at least one step ran"),
            final_epoch_loss: epoch_mean,
            epochs_used,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

fn small_encoder(variant: AttentionVariant, seed: u64, vocab: &Vocabulary) -> Encoder<f32> {
    let mut cfg = EncoderConfig::toy(vocab.len());
    cfg.hidden = 16;
    cfg.ffn = 32;
    cfg.feature_dim = 8;
    cfg.dropout = 0.0;
    cfg.seed = seed;
    cfg.variant = variant;
    Encoder::new(cfg).unwrap()
}

// ---- criteria ---------------------------------------------------------------

#[test]
fn criterion_01_kernel_equivalence() {
    let started = Instant::now();
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let n = rng.random_range(1..=202usize);
        let d = [16, 32, 64][case as usize % 3];
        let r = [8, 16, 32][(case as usize / 3) % 3];
        let std = 1.0 / (d as f64).sqrt();
        let mut mask: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() > 0.2)).collect();
        mask[0] = 1;
        let positions: Vec<i64> = (0..n as i64).collect();
        let qk = RotationSchedule::<f32>::new(d, ROTARY_BASE, 202).unwrap();
        let fs = RotationSchedule::<f32>::new(r, ROTARY_BASE, 202).unwrap();
        let fmap = FeatureMap::<f32>::new(d, r, FeatureNonlinearity::Relu, case);
        let q = randn32(vec![n, d], std, case * 11 + 1);
        let k = randn32(vec![n, d], std, case * 11 + 2);
        let v = randn32(vec![n, d], 1.0, case * 11 + 3);

        let got = linear_attention_modified(&q, &k, &v, &mask, &positions, &qk, &fmap, 1e-6);
        let want = oracle_linear_attention(
            &q, &k, &v, &mask, &positions, fmap.weight(), FeatureNonlinearity::Relu, ROTARY_BASE,
            true, 1e-6,
        );
        worst32 = worst32.max(max_abs_diff_rows(&got, &want));

        let got = linear_attention_original(&q, &k, &v, &mask, &positions, &fs, &fmap, 1e-6);
        let want = oracle_linear_attention(
            &q, &k, &v, &mask, &positions, fmap.weight(), FeatureNonlinearity::Relu, ROTARY_BASE,
            false, 1e-6,
        );
        worst32 = worst32.max(max_abs_diff_rows(&got, &want));

        // 64-bit pass on the same geometry
        let qk64 = RotationSchedule::<f64>::new(d, ROTARY_BASE, 202).unwrap();
        let fs64 = RotationSchedule::<f64>::new(r, ROTARY_BASE, 202).unwrap();
        let fmap64 = FeatureMap::from_weight(
            fmap.weight().cast::<f64>(),
            FeatureNonlinearity::Relu,
            case,
        );
        let (q64, k64, v64) = (q.cast::<f64>(), k.cast::<f64>(), v.cast::<f64>());
        let got = linear_attention_modified(&q64, &k64, &v64, &mask, &positions, &qk64, &fmap64, 1e-6);
        let want = oracle_linear_attention(
            &q64, &k64, &v64, &mask, &positions, fmap64.weight(), FeatureNonlinearity::Relu,
            ROTARY_BASE, true, 1e-6,
        );
        worst64 = worst64.max(max_abs_diff_rows(&got, &want));
        let got = linear_attention_original(&q64, &k64, &v64, &mask, &positions, &fs64, &fmap64, 1e-6);
        let want = oracle_linear_attention(
            &q64, &k64, &v64, &mask, &positions, fmap64.weight(), FeatureNonlinearity::Relu,
            ROTARY_BASE, false, 1e-6,
        );
        worst64 = worst64.max(max_abs_diff_rows(&got, &want));
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(worst32 <= 1e-5, "32-bit kernel equivalence error {worst32}");
    assert!(worst64 <= 1e-10, "64-bit kernel equivalence error {worst64}");
    assert!(secs < 60.0, "kernel equivalence took {secs}s");
    pass(1, &format!("100 instances/variant: max err {worst32:.2e} (f32), {worst64:.2e} (f64), {secs:.1}s"));
}

#[test]
fn criterion_02_rotary_relative_position() {
    // (a) inner-product identity over all m, n <= 202, 20 seeds
    let d = 16;
    let sched = RotationSchedule::<f64>::new(d, ROTARY_BASE, 202).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let q = randn64(vec![1, d], 1.0, seed * 2 + 1);
        let k = randn64(vec![1, d], 1.0, seed * 2 + 2);
        let mut rot_q = Vec::with_capacity(203);
        let mut rot_k = Vec::with_capacity(203);
        for m in 0..=202i64 {
            rot_q.push(sched.rotate(&q, &[m]).unwrap());
            rot_k.push(sched.rotate(&k, &[m]).unwrap());
        }
        let mut rel_q = Vec::with_capacity(405);
        for off in -202..=202i64 {
            rel_q.push(sched.rotate(&q, &[off]).unwrap());
        }
        for m in 0..=202usize {
            for n in 0..=202usize {
                let lhs: f64 =
                    rot_q[m].data().iter().zip(rot_k[n].data()).map(|(a, b)| a * b).sum();
                let rel = &rel_q[(m as i64 - n as i64 + 202) as usize];
                let rhs: f64 = rel.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    assert!(worst < 1e-6, "relative-position identity error {worst}");

    // (b) encoder-level global position shift
    let corpus = ["CC(C)O", "c1ccccc1N", "CCOC"];
    let (vocab, _) = build_vocabulary(corpus).unwrap();
    let seq = encode("CC(C)O", &vocab).unwrap();
    let batch = PaddedRows::from_sequences(&[seq]);
    let shift = |enc: &Encoder<f32>| -> f64 {
        let h0 = enc.encode_batch(&batch, Mode::Eval, ForwardOpts::default()).unwrap();
        let opts = ForwardOpts { position_offset: 7, ..Default::default() };
        let h7 = enc.encode_batch(&batch, Mode::Eval, opts).unwrap();
        h0.tape.tensor(h0.hidden).max_abs_diff(&h7.tape.tensor(h7.hidden))
    };
    let rot = shift(&small_encoder(AttentionVariant::FullRotary, 3, &vocab));
    assert!(rot <= 1e-5, "full rotary drifted {rot} under shift");
    let orig = shift(&small_encoder(AttentionVariant::LinearRotaryOriginal, 3, &vocab));
    assert!(orig <= 1e-5, "original linear rotary drifted {orig} under shift");
    let abs = shift(&small_encoder(AttentionVariant::FullAbsolute, 3, &vocab));
    assert!(abs > 1e-3, "absolute variant should move under shift, got {abs}");
    // the modified form rotates inputs before the nonlinear feature map, so
    // its rotary coupling is relative only in expectation over the random
    // features; the realized deviation is measured and reported
    let modified = shift(&small_encoder(AttentionVariant::LinearRotaryModified, 3, &vocab));
    pass(
        2,
        &format!(
            "identity err {worst:.2e}; shift drift: full_rotary {rot:.2e}, linear_original {orig:.2e}, \
             full_absolute {abs:.2e} (>1e-3), linear_modified {modified:.2e} (reported)"
        ),
    );
}

#[test]
fn criterion_03_normalization_dichotomy() {
    let d = 16;
    let n = 12;
    let qk = RotationSchedule::<f64>::new(d, ROTARY_BASE, 202).unwrap();
    let fs = RotationSchedule::<f64>::new(32, ROTARY_BASE, 202).unwrap();
    let mask = vec![1u8; n];
    let positions: Vec<i64> = (0..n as i64).collect();
    let mut modified_worst = 0.0f64;
    let mut original_max_dev = 0.0f64;
    for seed in 0..20u64 {
        let fmap = FeatureMap::<f64>::new(d, 32, FeatureNonlinearity::Relu, seed);
        let q = randn64(vec![n, d], 0.5, seed * 3 + 1);
        let k = randn64(vec![n, d], 0.5, seed * 3 + 2);
        let wm = attention_weights_linear(&q, &k, &mask, &positions, &qk, None, &fmap, true, 1e-6);
        for m in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let w = wm.at(m, j);
                assert!(w >= 0.0, "negative weight {w} in the modified form");
                sum += w;
            }
            modified_worst = modified_worst.max((sum - 1.0).abs());
        }
        let wo =
            attention_weights_linear(&q, &k, &mask, &positions, &qk, Some(&fs), &fmap, false, 1e-6);
        for m in 0..n {
            let sum: f64 = (0..n).map(|j| wo.at(m, j)).sum();
            original_max_dev = original_max_dev.max((sum - 1.0).abs());
        }
    }
    assert!(modified_worst <= 1e-5, "modified rows deviate by {modified_worst}");
    assert!(
        original_max_dev > 1e-3,
        "original rows unexpectedly normalized: {original_max_dev}"
    );
    pass(
        3,
        &format!(
            "modified row-sum dev {modified_worst:.2e} (<=1e-5, all weights >= 0); \
             original recorded dev {original_max_dev:.3}"
        ),
    );
}

#[test]
fn criterion_04_gradient_correctness() {
    let started = Instant::now();
    let worst = gradcheck_all(10);
    let secs = started.elapsed().as_secs_f64();
    assert!(worst < 1e-6, "finite-difference error {worst}");
    assert!(secs < 300.0, "gradcheck took {secs}s");
    pass(4, &format!("all ops + 4 attention variants, 10 seeds: max err {worst:.2e}, {secs:.1}s"));
}

#[test]
fn criterion_05_mlm_recipe_statistics() {
    // synthetic vocabulary with 200 non-special tokens
    let mut vocab_text = String::from("<pad>\n<unk>\n<bos>\n<eos>\n<mask>\n");
    for i in 0..200 {
        vocab_text.push_str(&format!("t{i}\n"));
    }
    let vocab = Vocabulary::from_text(&vocab_text).unwrap();

    let rows = 1000usize;
    let payload = 100usize;
    let width = payload + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ids = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        ids.push(BOS_ID);
        for _ in 0..payload {
            ids.push(rng.random_range(NUM_SPECIALS as u32..vocab.len() as u32));
        }
        ids.push(EOS_ID);
    }
    let batch = PaddedRows {
        ids,
        mask: vec![1u8; rows * width],
        rows,
        width,
        lengths: vec![width; rows],
    };
    let masked = apply_mlm_corruption(&batch, &vocab, 42, 0.15).unwrap();

    let maskable = rows * payload;
    let selected = masked.selected_count();
    let frac = selected as f64 / maskable as f64;
    assert!((frac - 0.15).abs() <= 0.005, "selected fraction {frac}");

    let mut n_mask = 0usize;
    let mut n_keep = 0usize;
    for i in 0..masked.input.len() {
        if masked.loss_mask[i] == 0 {
            continue;
        }
        if masked.input[i] == MASK_ID {
            n_mask += 1;
        } else if masked.input[i] == masked.labels[i] {
            n_keep += 1;
        }
    }
    let n_rand = selected - n_mask - n_keep;
    let fm = n_mask as f64 / selected as f64;
    let fr = n_rand as f64 / selected as f64;
    let fk = n_keep as f64 / selected as f64;
    assert!((fm - 0.8).abs() <= 0.01, "mask fraction {fm}");
    assert!((fr - 0.1).abs() <= 0.01, "random fraction {fr}");
    assert!((fk - 0.1).abs() <= 0.01, "keep fraction {fk}");
    pass(
        5,
        &format!(
            "{maskable} maskable positions: select {frac:.4}, mask/random/keep {fm:.3}/{fr:.3}/{fk:.3}"
        ),
    );
}

#[test]
fn criterion_06_bucketing_contract() {
    let spec = BucketSpec::default();
    assert_eq!(assign_bucket(42, &spec).unwrap(), 0);
    assert_eq!(assign_bucket(43, &spec).unwrap(), 1);
    assert_eq!(assign_bucket(122, &spec).unwrap(), 2);
    assert_eq!(assign_bucket(123, &spec).unwrap(), 3);

    // carry: bucket 4 emits only at >= 50 rows
    let mut bz = Bucketizer::new(spec.clone()).unwrap();
    let long_seq = |len: usize| chemlm::tokenizer::TokenSequence {
        ids: {
            let mut v = vec![BOS_ID];
            v.extend(std::iter::repeat(7u32).take(len - 2));
            v.push(EOS_ID);
            v
        },
        raw: String::new(),
        framed: true,
    };
    for i in 0..49 {
        assert!(bz.push(&[long_seq(150)]).unwrap().is_empty(), "emitted early at {i}");
    }
    let out = bz.push(&[long_seq(150)]).unwrap();
    assert_eq!(out.buckets.len(), 1);
    assert_eq!(out.buckets[0].data.rows, 50);

    // partition conservation over a 10k random-length stream
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let lengths: Vec<usize> = (0..10_000).map(|_| rng.random_range(2..=202usize)).collect();
    let mut bz = Bucketizer::new(spec.clone()).unwrap();
    let mut emitted: Vec<usize> = Vec::new();
    let mut i = 0usize;
    while i < lengths.len() {
        let chunk = rng.random_range(1..=64usize).min(lengths.len() - i);
        let seqs: Vec<_> = lengths[i..i + chunk].iter().map(|&l| long_seq(l)).collect();
        let out = bz.push(&seqs).unwrap();
        for b in &out.buckets {
            for r in 0..b.data.rows {
                assert_eq!(assign_bucket(b.data.lengths[r], &spec).unwrap(), b.bucket);
                emitted.push(b.data.lengths[r]);
            }
        }
        i += chunk;
    }
    for b in &bz.flush().buckets {
        for r in 0..b.data.rows {
            emitted.push(b.data.lengths[r]);
        }
    }
    let mut got = emitted;
    got.sort_unstable();
    let mut want = lengths;
    want.sort_unstable();
    assert_eq!(got, want, "partition lost or duplicated rows");
    pass(6, "boundaries 42/43 and 122/123 route correctly; bucket-4 carry emits at 50; 10k-row partition conserved");
}

#[test]
fn criterion_07_overfit_smoke_test() {
    let t = trained();
    let ln_v = (t.vocab.len() as f64).ln();
    assert!(
        (t.initial_loss - ln_v).abs() / ln_v < 0.05,
        "initial loss {} vs ln|V| {ln_v}",
        t.initial_loss
    );
    assert!(t.final_epoch_loss < 0.1, "final loss {}", t.final_epoch_loss);
    assert!(t.epochs_used <= 200, "needed {} epochs", t.epochs_used);
    assert!(t.seconds < 600.0, "took {}s", t.seconds);
    pass(
        7,
        &format!(
            "ln|V| {ln_v:.3}, initial {:.3}, final {:.4} after {} epochs in {:.1}s",
            t.initial_loss, t.final_epoch_loss, t.epochs_used, t.seconds
        ),
    );
}

#[test]
fn criterion_08_pad_invariance() {
    let corpus = ["CC(C)O", "c1ccccc1N", "CCOC"];
    let (vocab, _) = build_vocabulary(corpus).unwrap();
    let mut worst_emb = 0.0f64;
    let mut worst_loss = 0.0f64;
    for variant in [AttentionVariant::LinearRotaryModified, AttentionVariant::FullRotary] {
        let enc = small_encoder(variant, 5, &vocab);
        let seqs = vec![encode("CC(C)O", &vocab).unwrap(), encode("c1ccccc1N", &vocab).unwrap()];
        let batch = PaddedRows::from_sequences(&seqs);
        let masked = apply_mlm_corruption(&batch, &vocab, 3, 0.3).unwrap();
        for extra in [1usize, 7, 40] {
            let padded = batch.with_extra_padding(extra);
            // embeddings
            let mut fw_a = enc.encode_batch(&batch, Mode::Eval, ForwardOpts::default()).unwrap();
            let pooled_a = enc.pooled_hidden(&mut fw_a, &batch);
            let ta = fw_a.tape.tensor(pooled_a);
            let mut fw_b = enc.encode_batch(&padded, Mode::Eval, ForwardOpts::default()).unwrap();
            let pooled_b = enc.pooled_hidden(&mut fw_b, &padded);
            let tb = fw_b.tape.tensor(pooled_b);
            worst_emb = worst_emb.max(ta.max_abs_diff(&tb));

            // MLM loss with the same corruption, labels/mask zero-extended
            let loss_of = |rows: &PaddedRows, input: &[u32], labels: &[u32], lm: &[u8]| -> f64 {
                let input_rows = PaddedRows {
                    ids: input.to_vec(),
                    mask: rows.mask.clone(),
                    rows: rows.rows,
                    width: rows.width,
                    lengths: rows.lengths.clone(),
                };
                let mut fw = enc.encode_batch(&input_rows, Mode::Eval, ForwardOpts::default()).unwrap();
                let loss = enc.mlm_loss(&mut fw, labels, lm).unwrap();
                fw.tape.data(loss)[0] as f64
            };
            let la = loss_of(&batch, &masked.input, &masked.labels, &masked.loss_mask);
            let mut input_p = Vec::new();
            let mut labels_p = Vec::new();
            let mut lm_p = Vec::new();
            for r in 0..batch.rows {
                input_p.extend_from_slice(&masked.input[r * batch.width..(r + 1) * batch.width]);
                input_p.extend(std::iter::repeat(0u32).take(extra));
                labels_p.extend_from_slice(&masked.labels[r * batch.width..(r + 1) * batch.width]);
                labels_p.extend(std::iter::repeat(0u32).take(extra));
                lm_p.extend_from_slice(&masked.loss_mask[r * batch.width..(r + 1) * batch.width]);
                lm_p.extend(std::iter::repeat(0u8).take(extra));
            }
            let lb = loss_of(&padded, &input_p, &labels_p, &lm_p);
            worst_loss = worst_loss.max((la - lb).abs());
        }
    }
    assert!(worst_emb <= 1e-5, "embedding drift {worst_emb}");
    assert!(worst_loss <= 1e-5, "loss drift {worst_loss}");
    pass(8, &format!("embedding drift {worst_emb:.2e}, loss drift {worst_loss:.2e} over 1/7/40 pad columns"));
}

#[test]
fn criterion_09_accumulation_equivalence() {
    let corpus = ["CC(C)O", "c1ccccc1N", "CCOC", "CCS", "COC(C)C"];
    let (vocab, _) = build_vocabulary(corpus).unwrap();
    let enc = small_encoder(AttentionVariant::LinearRotaryModified, 9, &vocab);

    let short: Vec<_> = ["CCS", "CCOC", "CC(C)O"]
        .iter()
        .map(|s| encode(s, &vocab).unwrap())
        .collect();
    let long: Vec<_> =
        ["c1ccccc1N", "COC(C)C"].iter().map(|s| encode(s, &vocab).unwrap()).collect();
    let batch_a = PaddedRows::from_sequences(&short);
    let batch_b = PaddedRows::from_sequences(&long);
    let masked_a = apply_mlm_corruption(&batch_a, &vocab, 11, 0.4).unwrap();
    let masked_b = apply_mlm_corruption(&batch_b, &vocab, 12, 0.4).unwrap();
    let w_a = 3.0 / 5.0;
    let w_b = 2.0 / 5.0;

    // (a) per-bucket tapes, weighted accumulation
    let mut enc_a = enc.with_variant(enc.config.variant).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (batch, masked, w) in [(&batch_a, &masked_a, w_a), (&batch_b, &masked_b, w_b)] {
        let input = PaddedRows {
            ids: masked.input.clone(),
            mask: batch.mask.clone(),
            rows: batch.rows,
            width: batch.width,
            lengths: batch.lengths.clone(),
        };
        let mut fw = enc_a
            .encode_batch(&input, Mode::Train { dropout_rng: &mut rng }, ForwardOpts::default())
            .unwrap();
        let loss = enc_a.mlm_loss(&mut fw, &masked.labels, &masked.loss_mask).unwrap();
        fw.tape.backward(loss).unwrap();
        enc_a.params.accumulate_grads(&fw.tape, &fw.param_vars, w);
    }

    // (b) one combined pass: loss = w_a * CE_a + w_b * CE_b on a single tape
    let mut enc_b = enc.with_variant(enc.config.variant).unwrap();
    let width = batch_a.width.max(batch_b.width);
    let pad_to = |m: &PaddedRows, inp: &[u32]| -> (PaddedRows, Vec<u32>, Vec<u8>) {
        let extra = width - m.width;
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        let mut labels = Vec::new();
        let mut input = Vec::new();
        for r in 0..m.rows {
            ids.extend_from_slice(&m.ids[r * m.width..(r + 1) * m.width]);
            ids.extend(std::iter::repeat(0u32).take(extra));
            mask.extend_from_slice(&m.mask[r * m.width..(r + 1) * m.width]);
            mask.extend(std::iter::repeat(0u8).take(extra));
            input.extend_from_slice(&inp[r * m.width..(r + 1) * m.width]);
            input.extend(std::iter::repeat(0u32).take(extra));
            labels.extend(std::iter::repeat(0u32).take(width)); // filled below
        }
        let _ = labels;
        (
            PaddedRows {
                ids: input,
                mask,
                rows: m.rows,
                width,
                lengths: m.lengths.clone(),
            },
            ids,
            vec![],
        )
    };
    let (in_a, _, _) = pad_to(&batch_a, &masked_a.input);
    let (in_b, _, _) = pad_to(&batch_b, &masked_b.input);
    let combined = PaddedRows {
        ids: [in_a.ids.clone(), in_b.ids.clone()].concat(),
        mask: [in_a.mask.clone(), in_b.mask.clone()].concat(),
        rows: in_a.rows + in_b.rows,
        width,
        lengths: [batch_a.lengths.clone(), batch_b.lengths.clone()].concat(),
    };
    let pad_flat = |src: &[u32], rows: usize, w: usize| -> Vec<u32> {
        let mut out = Vec::new();
        for r in 0..rows {
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
            out.extend(std::iter::repeat(0u32).take(width - w));
        }
        out
    };
    let pad_flat8 = |src: &[u8], rows: usize, w: usize| -> Vec<u8> {
        let mut out = Vec::new();
        for r in 0..rows {
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
            out.extend(std::iter::repeat(0u8).take(width - w));
        }
        out
    };
    let labels: Vec<u32> = [
        pad_flat(&masked_a.labels, batch_a.rows, batch_a.width),
        pad_flat(&masked_b.labels, batch_b.rows, batch_b.width),
    ]
    .concat();
    let mask_a_rows = pad_flat8(&masked_a.loss_mask, batch_a.rows, batch_a.width);
    let mask_b_rows = pad_flat8(&masked_b.loss_mask, batch_b.rows, batch_b.width);
    let lm_a: Vec<u8> = [mask_a_rows.clone(), vec![0; batch_b.rows * width]].concat();
    let lm_b: Vec<u8> = [vec![0; batch_a.rows * width], mask_b_rows].concat();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fw = enc_b
        .encode_batch(&combined, Mode::Train { dropout_rng: &mut rng }, ForwardOpts::default())
        .unwrap();
    let logits = enc_b.mlm_logits(&mut fw);
    let ce_a = fw.tape.cross_entropy_masked(logits, &labels, &lm_a).unwrap();
    let ce_b = fw.tape.cross_entropy_masked(logits, &labels, &lm_b).unwrap();
    let sa = fw.tape.scale(ce_a, w_a as f32);
    let sb = fw.tape.scale(ce_b, w_b as f32);
    let total = fw.tape.add(sa, sb);
    fw.tape.backward(total).unwrap();
    enc_b.params.accumulate_grads(&fw.tape, &fw.param_vars, 1.0);

    let mut worst = 0.0f64;
    for (pa, pb) in enc_a.params.iter().zip(enc_b.params.iter()) {
        match (&pa.grad, &pb.grad) {
            (Some(ga), Some(gb)) => worst = worst.max(ga.max_abs_diff(gb)),
            (None, None) => {}
            _ => panic!("gradient presence mismatch for {}", pa.name),
        }
    }
    assert!(worst <= 1e-5, "accumulated vs single-pass gradient gap {worst}");
    pass(9, &format!("cross-bucket accumulation matches single weighted pass: max grad gap {worst:.2e}"));
}

#[test]
fn criterion_10_checkpoint_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let corpus: Vec<String> = (2..42).map(|i| format!("{}O", "C".repeat(i))).collect();
    let (vocab, _) = build_vocabulary(&corpus).unwrap();
    let make_cfg = || TrainConfig {
        epochs: 1,
        batch_size: 4,
        lr: 1e-3,
        seed: 21,
        checkpoint_every: 5,
        ..Default::default()
    };
    let make_enc = |vocab: &Vocabulary| {
        let mut cfg = EncoderConfig::toy(vocab.len());
        cfg.hidden = 16;
        cfg.ffn = 32;
        cfg.feature_dim = 8;
        cfg.seed = 21;
        Encoder::<f32>::new(cfg).unwrap()
    };

    // uninterrupted run
    let mut full_rows = Vec::new();
    let mut tr = Pretrainer::new(make_enc(&vocab), vocab.clone(), &corpus, make_cfg(), BucketSpec::default())
        .unwrap();
    tr.run(&mut |r| full_rows.push((r.step, r.bucket.clone(), r.loss)), Some(dir.path())).unwrap();

    // resume from the step-5 checkpoint and replay the tail
    let ckpt = Checkpoint::load(&dir.path().join("step_5.mlfc")).unwrap();
    let mut resumed = Pretrainer::<f32>::resume(&ckpt, &corpus, vocab.clone(), make_cfg(), BucketSpec::default())
        .unwrap();
    assert_eq!(resumed.global_step, 5);
    let mut tail_rows = Vec::new();
    resumed.run(&mut |r| tail_rows.push((r.step, r.bucket.clone(), r.loss)), None).unwrap();

    let full_tail: Vec<_> = full_rows.iter().filter(|(s, _, _)| *s > 5).cloned().collect();
    assert_eq!(full_tail.len(), tail_rows.len(), "row count mismatch after resume");
    let mut worst = 0.0f64;
    for ((s1, b1, l1), (s2, b2, l2)) in full_tail.iter().zip(&tail_rows) {
        assert_eq!((s1, b1), (s2, b2));
        worst = worst.max((l1 - l2).abs());
    }
    assert!(worst <= 1e-6, "resumed loss stream deviates by {worst}");

    // parameters at the end agree bit-exactly
    let gap = tr.encoder.params.max_abs_diff(&resumed.encoder.params);
    assert_eq!(gap, 0.0, "parameter gap {gap} after resume");

    // save -> load -> forward is bit-identical
    let final_ckpt = Checkpoint::load(&dir.path().join("final.mlfc")).unwrap();
    let reloaded: Encoder<f32> = chemlm::checkpoint::encoder_from_checkpoint(&final_ckpt).unwrap();
    let batch = PaddedRows::from_sequences(&[encode(&corpus[0], &vocab).unwrap()]);
    let h1 = tr.encoder.encode_batch(&batch, Mode::Eval, ForwardOpts::default()).unwrap();
    let h2 = reloaded.encode_batch(&batch, Mode::Eval, ForwardOpts::default()).unwrap();
    assert_eq!(h1.tape.data(h1.hidden), h2.tape.data(h2.hidden), "reloaded forward differs");
    pass(10, &format!("resume reproduces the loss stream (max gap {worst:.1e}) and save/load forward is bit-identical"));
}

#[test]
fn criterion_11_analysis_oracles() {
    // hand-counted operations
    let fa = NGramFingerprint::from_tokens(&["a", "b"], 1, 2048);
    let fb = NGramFingerprint::from_tokens(&["b", "c"], 1, 2048);
    assert!((tanimoto(&fa, &fb).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    let auc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    assert!((auc - 0.75).abs() < 1e-12);

    // synthetic geometries: alternating C/O chains on a line, 1.3 A spacing
    let corpus = ["CO", "COCO", "COCOCO"];
    let (vocab, _) = build_vocabulary(corpus).unwrap();
    let enc = small_encoder(AttentionVariant::FullRotary, 13, &vocab);
    let mut geoms = Vec::new();
    for k in 2..=13usize {
        let smiles = "CO".repeat(k / 2) + if k % 2 == 1 { "C" } else { "" };
        let n_atoms = k;
        let symbols: Vec<String> =
            (0..n_atoms).map(|i| if i % 2 == 0 { "C" } else { "O" }.to_string()).collect();
        let coords: Vec<[f64; 3]> = (0..n_atoms).map(|i| [1.3 * i as f64, 0.0, 0.0]).collect();
        geoms.push(MoleculeGeometry { smiles, symbols, coords });
    }
    // one deliberately misaligned record; it must be skipped and counted
    geoms.push(MoleculeGeometry {
        smiles: "COC".into(),
        symbols: vec!["C".into(), "O".into()],
        coords: vec![[0.0; 3], [1.3, 0.0, 0.0]],
    });

    let layer = 1;
    let transform = AffinityTransform::default();
    let report =
        attention_distance_cosine(&enc, &vocab, &geoms, layer, transform, 256).unwrap();
    assert_eq!(report.n_skipped, 1);
    assert_eq!(report.n_aligned, 12);

    // independent direct-summation recomputation
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for geom in &geoms[..12] {
        let seq = encode(&geom.smiles, &vocab).unwrap();
        let atoms = chemlm::analysis::atom_token_alignment(&seq, &vocab);
        assert_eq!(atoms.len(), geom.symbols.len());
        let map = enc.attention_map(&seq, layer, 256).unwrap();
        // re-pool the heads by hand
        let n = map.per_head[0].rows();
        let mut pooled = vec![0.0f64; n * n];
        for h in &map.per_head {
            for (o, v) in pooled.iter_mut().zip(h.data()) {
                *o += *v as f64 / map.per_head.len() as f64;
            }
        }
        let mut vecs: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); 3];
        for (ai, &pi) in atoms.iter().enumerate() {
            for (aj, &pj) in atoms.iter().enumerate() {
                if ai == aj {
                    continue;
                }
                let d = 1.3 * (ai as f64 - aj as f64).abs();
                let cat = if d <= 0.0 {
                    None
                } else if d <= 2.0 {
                    Some(0)
                } else if d <= 4.0 {
                    Some(1)
                } else if d <= 10.0 {
                    Some(2)
                } else {
                    None
                };
                if let Some(slot) = cat {
                    vecs[slot].0.push(pooled[(pi + 1) * n + (pj + 1)]);
                    vecs[slot].1.push((-d / 2.0).exp());
                }
            }
        }
        for (slot, (att, aff)) in vecs.iter().enumerate() {
            if let Some(c) = cosine(att, aff) {
                sums[slot] += c;
                counts[slot] += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    for row in &report.rows {
        let slot = row.category as usize;
        assert_eq!(row.n_molecules, counts[slot], "{:?} molecule count", row.category);
        if counts[slot] > 0 {
            let want = sums[slot] / counts[slot] as f64;
            worst = worst.max((row.mean_cosine - want).abs());
        }
    }
    assert!(worst <= 1e-6, "pipeline vs direct-summation gap {worst}");

    // category partition: every in-range pair lands in exactly one bin
    for d in [0.5, 2.0, 2.5, 4.0, 7.0, 10.0] {
        assert!(DistanceCategory::classify(d).is_some());
    }
    assert_eq!(DistanceCategory::classify(10.01), None);
    pass(
        11,
        &format!(
            "tanimoto 1/3 and AUC 0.75 hand checks; cosine pipeline matches direct summation to {worst:.1e} on 12 molecules"
        ),
    );
}

#[test]
fn criterion_12_finetune_sanity() {
    let t = trained();
    // 32 molecules, label = payload token count
    let smiles: Vec<String> = (2..=33).map(|k| "CO".repeat(k)).collect();
    let labels: Vec<f64> = (2..=33).map(|k| 2.0 * k as f64).collect();
    let mut csv = String::from("smiles,length\n");
    for (s, l) in smiles.iter().zip(&labels) {
        csv.push_str(&format!("{s},{l}\n"));
    }
    let data = LabeledDataset::parse_csv(&csv).unwrap();
    let (mut train_idx, mut valid_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..32usize {
        match i % 5 {
            3 => valid_idx.push(i),
            4 => test_idx.push(i),
            _ => train_idx.push(i),
        }
    }
    let split = Split { train: train_idx.clone(), valid: valid_idx.clone(), test: test_idx.clone() };

    // constant-predictor baseline
    let train_mean = train_idx.iter().map(|&i| labels[i]).sum::<f64>() / train_idx.len() as f64;
    let test_labels: Vec<f64> = test_idx.iter().map(|&i| labels[i]).collect();
    let baseline = rmse(&vec![train_mean; test_labels.len()], &test_labels);

    // least-squares oracle on the frozen embeddings confirms decodability
    let embed = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                let seq = encode(&smiles[i], &t.vocab).unwrap();
                t.encoder
                    .embed_molecule(&seq)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect()
    };
    let x_train = embed(&train_idx);
    let y_train: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
    let x_valid = embed(&valid_idx);
    let y_valid: Vec<f64> = valid_idx.iter().map(|&i| labels[i]).collect();
    let x_test = embed(&test_idx);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for lambda in [1e-4, 1e-2, 1.0, 10.0] {
        let beta = ridge_fit(&x_train, &y_train, lambda);
        let pv: Vec<f64> = x_valid.iter().map(|x| ridge_predict(&beta, x)).collect();
        let err = rmse(&pv, &y_valid);
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, beta));
        }
    }
    let (_, beta) = best.unwrap();
    let oracle_pred: Vec<f64> = x_test.iter().map(|x| ridge_predict(&beta, x)).collect();
    let oracle_rmse = rmse(&oracle_pred, &test_labels);
    assert!(
        oracle_rmse <= baseline / 3.0,
        "least-squares oracle rmse {oracle_rmse} vs baseline {baseline}: length not linearly decodable"
    );

    // frozen-head fine-tune must beat the constant predictor by >= 3x
    let mut encoder = t.encoder.with_variant(t.encoder.config.variant).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        finetune_lr: 1e-2,
        seed: 5,
        ..Default::default()
    };
    let (_head, report) = finetune(
        &mut encoder,
        &t.vocab,
        &data,
        &split,
        Task::Regression,
        64,
        FinetuneMode::Frozen,
        &cfg,
    )
    .unwrap();
    let head_rmse = report
        .test_metrics
        .iter()
        .find(|(k, _)| k == "rmse")
        .map(|(_, v)| *v)
        .unwrap();
    assert!(
        head_rmse <= baseline / 3.0,
        "head rmse {head_rmse} does not beat baseline {baseline} by 3x"
    );
    pass(
        12,
        &format!(
            "baseline rmse {baseline:.2}, least-squares oracle {oracle_rmse:.3}, frozen head {head_rmse:.3} (best epoch {})",
            report.best_epoch
        ),
    );
}
