use agat::autodiff::Tape;
use agat::policy::{influence_scores, layer_keep_count, random_input_drop, select_kept, DropPolicy};
use agat::vit::{msa_forward, BlockParams, ForwardOptions, Keep, Model, ModelConfig, ParamVars, Params};
use agat::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn row_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols)
        .map(|c| x.iter().enumerate().map(|(r, v)| v * w.data()[r * cols + c]).sum())
        .collect()
}

/// Single-block attention over all rows of `x`, where query rows may only
/// attend to keys in `allowed`. Written out longhand as an oracle.
fn masked_msa(config: &ModelConfig, block: &BlockParams, x: &[Vec<f64>], allowed: &[usize]) -> Vec<Vec<f64>> {
    let d = config.dim;
    let h = config.heads;
    let hd = d / h;
    let qkv: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            vec_mat(
                &row_layer_norm(row, block.ln1_gamma.data(), block.ln1_beta.data()),
                &block.w_qkv,
            )
        })
        .collect();
    x.iter()
        .enumerate()
        .map(|(i, row)| {
            let mut mixed = vec![0.0; d];
            for head in 0..h {
                let q = &qkv[i][head * hd..(head + 1) * hd];
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        let k = &qkv[j][d + head * hd..d + (head + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(allowed) {
                    let v = &qkv[j][2 * d + head * hd..2 * d + (head + 1) * hd];
                    for t in 0..hd {
                        mixed[head * hd + t] += w / z * v[t];
                    }
                }
            }
            let proj = vec_mat(&mixed, &block.w_proj);
            row.iter().zip(proj).map(|(a, b)| a + b).collect()
        })
        .collect()
}

#[test]
fn sub_sequence_matches_masked_attention() {
    let config = ModelConfig {
        dim: 16,
        heads: 2,
        depth: 1,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = Params::init(&config, 4);
    let block = &mut params.blocks[0];
    block.ln1_gamma = random_tensor(&mut rng, &[16], 1.0).map(|v| 1.0 + 0.3 * v);
    block.ln1_beta = random_tensor(&mut rng, &[16], 0.2);
    let p = config.seq_len();
    for trial in 0..20 {
        let x = random_tensor(&mut rng, &[p, 16], 1.0);
        let rows: Vec<Vec<f64>> = x.data().chunks(16).map(<[f64]>::to_vec).collect();
        let j = 1 + trial % (p - 1);
        let oracle = masked_msa(&config, &params.blocks[0], &rows, &[0, j]);

        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params, false);
        let sub: Vec<f64> = rows[0].iter().chain(&rows[j]).cloned().collect();
        let xs = tape.constant(Tensor::new(&[1, 2, 16], sub).unwrap());
        let out = msa_forward(&mut tape, &config, &vars.blocks[0], xs, &[vec![0, j]], Keep::All, None).unwrap();
        let got = tape.value(out.x).data();
        for (r, &orig) in [0, j].iter().enumerate() {
            for c in 0..16 {
                let (a, b) = (got[r * 16 + c], oracle[orig][c]);
                assert!((a - b).abs() < 1e-12, "trial {trial} row {orig} col {c}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn train_and_eval_agree_without_policy() {
    let config = ModelConfig::tiny();
    let params = Params::init(&config, 2);
    let model = Model::new(&config, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&mut rng, &[5, 1, 4, 4], 0.5).map(|v| v + 0.5);
    let train = model
        .forward(&x, &ForwardOptions::train(DropPolicy::None), &mut rng)
        .unwrap();
    let eval = model.forward(&x, &ForwardOptions::eval(), &mut rng).unwrap();
    assert_eq!(train.logits, eval.logits);
}

#[test]
fn depth_twelve_keep_point_nine_reaches_last_block_at_31_percent() {
    let config = ModelConfig {
        num_classes: 10,
        ..ModelConfig::vit_base()
    };
    assert_eq!(layer_keep_count(197, 0.9), 177);
    let mut n = config.seq_len();
    for _ in 0..11 {
        n = layer_keep_count(n, 0.9);
    }
    assert_eq!(n, 63);
    let fraction = (n - 1) as f64 / 196.0;
    assert!((fraction - 0.9f64.powi(11)).abs() < 0.01, "{fraction}");

    // The forward pass agrees with the arithmetic on a narrow model of the same length.
    let narrow = ModelConfig {
        dim: 8,
        heads: 2,
        ..config
    };
    let params = Params::init(&narrow, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[1, 3, 224, 224], 0.5).map(|v| v + 0.5);
    let trace = Model::new(&narrow, &params)
        .forward(
            &x,
            &ForwardOptions::train(DropPolicy::AttentionGuided { keep: 0.9 }),
            &mut rng,
        )
        .unwrap();
    assert_eq!(trace.seq_lens()[11], 63);
}

#[test]
fn influence_scores_sum_to_sequence_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let heads = rng.random_range(1..4);
        let p = rng.random_range(1..12);
        let mut a = Vec::with_capacity(heads * p * p);
        for _ in 0..heads * p {
            let row: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
            let z: f64 = row.iter().sum();
            a.extend(row.iter().map(|v| v / z));
        }
        let s: f64 = influence_scores(&a, heads, p).iter().sum();
        assert!((s - p as f64).abs() < 1e-9);
    }
}

#[test]
fn selection_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let p = rng.random_range(2..30);
        let k = rng.random_range(2..=p);
        // Distinct scores, so the kept set is unambiguous.
        let mut scores: Vec<f64> = (0..p).map(|i| i as f64 + 0.5 * rng.random::<f64>()).collect();
        scores[1..].shuffle(&mut rng);
        let mut perm: Vec<usize> = (1..p).collect();
        perm.shuffle(&mut rng);
        // permuted[perm[i]] = scores[i + 1]
        let mut permuted = scores.clone();
        for (i, &to) in perm.iter().enumerate() {
            permuted[to] = scores[i + 1];
        }
        let base = select_kept(&scores, k).unwrap();
        let moved = select_kept(&permuted, k).unwrap();
        let mut expected: Vec<usize> = base[1..].iter().map(|&i| perm[i - 1]).collect();
        expected.sort_unstable();
        assert_eq!(moved[0], 0);
        assert_eq!(&moved[1..], expected.as_slice());
    }
}

#[test]
fn random_drop_counts_and_determinism() {
    let mut a = ChaCha8Rng::seed_from_u64(9);
    let mut b = ChaCha8Rng::seed_from_u64(9);
    let kept = random_input_drop(196, 0.4, &mut a);
    assert_eq!(kept.len(), 1 + 118);
    assert_eq!(kept, random_input_drop(196, 0.4, &mut b));
    assert_eq!(random_input_drop(196, 0.0, &mut a), (0..197).collect::<Vec<_>>());
}
