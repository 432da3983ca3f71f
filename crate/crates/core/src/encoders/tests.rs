use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{Segment, Tape, Var};
use crate::gradcheck::{central_difference, tensor_relative_error};

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn micro_text(seed: u64, layers: usize) -> TextEncoder {
    let cfg = TextEncoderConfig {
        vocab_size: 7,
        width: 4,
        layers,
        heads: 2,
        embed_dim: 3,
        max_len: 6,
        mlp_ratio: 2,
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = TextEncoder::new(cfg, &mut r).unwrap();
    // spread the parameters so that every path carries signal
    for m in enc.params_mut() {
        for v in m.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    enc.log_temperature = Matrix::scalar(0.5);
    enc
}

// ---------------------------------------------------------------------------
// Independent scalar reference for the text encoder.

fn ref_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) / (var + 1e-5).sqrt() * g + b)
        .collect()
}

fn ref_linear(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.get(0, j) + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
        .collect()
}

fn ref_encode(enc: &TextEncoder, input: &[Vec<f64>]) -> Vec<f64> {
    let w = enc.width();
    let heads = enc.config.heads;
    let dh = w / heads;
    let mut x: Vec<Vec<f64>> = input
        .iter()
        .enumerate()
        .map(|(p, e)| e.iter().zip(enc.positional_embedding.row(p)).map(|(a, b)| a + b).collect())
        .collect();
    for blk in &enc.blocks {
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                let h = ref_layer_norm(row, blk.ln1_gain.row(0), blk.ln1_bias.row(0));
                ref_linear(&h, &blk.qkv_weight, &blk.qkv_bias)
            })
            .collect();
        let mut attn = vec![vec![0.0; w]; x.len()];
        for i in 0..x.len() {
            for h in 0..heads {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..dh).map(|k| qkv[i][h * dh + k] * qkv[j][w + h * dh + k]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    for k in 0..dh {
                        attn[i][h * dh + k] += s.exp() / z * qkv[j][2 * w + h * dh + k];
                    }
                }
            }
        }
        for i in 0..x.len() {
            let o = ref_linear(&attn[i], &blk.out_weight, &blk.out_bias);
            for k in 0..w {
                x[i][k] += o[k];
            }
            let h = ref_layer_norm(&x[i], blk.ln2_gain.row(0), blk.ln2_bias.row(0));
            let f: Vec<f64> = ref_linear(&h, &blk.fc_weight, &blk.fc_bias)
                .into_iter()
                .map(|v| v / (1.0 + (-1.702 * v).exp()))
                .collect();
            let m = ref_linear(&f, &blk.proj_weight, &blk.proj_bias);
            for k in 0..w {
                x[i][k] += m[k];
            }
        }
    }
    let last = ref_layer_norm(x.last().unwrap(), enc.ln_final_gain.row(0), enc.ln_final_bias.row(0));
    (0..enc.embed_dim())
        .map(|j| (0..w).map(|k| last[k] * enc.projection.get(k, j)).sum())
        .collect()
}

#[test]
fn packed_encoder_matches_scalar_reference() {
    let enc = micro_text(1, 2);
    let batch = vec![vec![3, 4, 1], vec![5, 1], vec![6, 3, 3, 4, 1]];
    let out = enc.encode_batch(&batch).unwrap();
    for (i, seq) in batch.iter().enumerate() {
        let input: Vec<Vec<f64>> = seq.iter().map(|&t| enc.token_embedding.row(t).to_vec()).collect();
        let expected = ref_encode(&enc, &input);
        for (a, b) in out.row(i).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn single_token_hand_computed() {
    // width 2, 1 layer, 1 head, mlp ratio 1, embed_dim 1; values frozen from a
    // scalar hand evaluation of the block arithmetic.
    let cfg = TextEncoderConfig {
        vocab_size: 4,
        width: 2,
        layers: 1,
        heads: 1,
        embed_dim: 1,
        max_len: 2,
        mlp_ratio: 1,
    };
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut enc = TextEncoder::new(cfg, &mut r).unwrap();
    enc.token_embedding = Matrix::from_rows(&[[0.0, 0.0], [1.0, -1.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
    enc.positional_embedding = Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.0]]).unwrap();
    let b = &mut enc.blocks[0];
    b.ln1_gain = Matrix::row_vector(&[1.0, 1.0]);
    b.ln1_bias = Matrix::row_vector(&[0.0, 0.0]);
    b.qkv_weight = Matrix::from_rows(&[[1.0, 0.0, 0.0, 1.0, 2.0, 0.0], [0.0, 1.0, 1.0, 0.0, 0.0, 1.0]]).unwrap();
    b.qkv_bias = Matrix::zeros(1, 6);
    b.out_weight = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.5]]).unwrap();
    b.out_bias = Matrix::row_vector(&[0.1, -0.1]);
    b.ln2_gain = Matrix::row_vector(&[1.0, 2.0]);
    b.ln2_bias = Matrix::row_vector(&[0.0, 0.5]);
    b.fc_weight = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    b.fc_bias = Matrix::zeros(1, 2);
    b.proj_weight = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    b.proj_bias = Matrix::zeros(1, 2);
    enc.ln_final_gain = Matrix::row_vector(&[1.0, 1.0]);
    enc.ln_final_bias = Matrix::row_vector(&[0.0, 0.0]);
    enc.projection = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();

    // embedded input of one row; x = [1.5, -1] after the position is added
    let out = enc.encode_embedded(&Matrix::from_rows(&[[1.0, -1.0]]).unwrap()).unwrap();
    assert_eq!(out.shape(), (1, 1));
    assert!((out.get(0, 0) - HAND_SINGLE_TOKEN).abs() < 1e-9, "{}", out.get(0, 0));
}

/// Evaluated by hand: LN1([1.5, -1]) = ±0.999998, attention over one position
/// returns v = [2·h0, h1], out-proj and residual give x1 ≈ [3.6, -1.6],
/// LN2 then the QuickGELU MLP give x2 ≈ [4.445789, -1.708336], the final LN is
/// ≈ [1, -1] and the projection sums 1·1 + 2·(-1).
const HAND_SINGLE_TOKEN: f64 = -0.999_999_471_923_263_7;

#[test]
fn embedded_input_equals_token_path() {
    let enc = micro_text(2, 2);
    let seq = vec![3, 5, 1];
    let a = enc.encode_batch(std::slice::from_ref(&seq)).unwrap();
    let b = enc.encode_embedded(&enc.embed_tokens(&seq)).unwrap();
    assert_eq!(a, b);
    assert!(matches!(enc.encode_embedded(&Matrix::zeros(2, 3)), Err(Error::Parameter(_))));
}

#[test]
fn zero_attention_ignores_earlier_positions() {
    let mut enc = micro_text(3, 1);
    let blk = &mut enc.blocks[0];
    blk.qkv_weight = Matrix::zeros(4, 12);
    blk.qkv_bias = Matrix::zeros(1, 12);
    blk.out_bias = Matrix::zeros(1, 4);
    let mut x1 = enc.embed_tokens(&[3, 4, 1]);
    let y1 = enc.encode_embedded(&x1).unwrap();
    x1.row_mut(0).copy_from_slice(&[9.0, -3.0, 2.0, 0.5]);
    let y2 = enc.encode_embedded(&x1).unwrap();
    assert_eq!(y1, y2);
}

#[test]
fn batch_shape_duplicates_and_length_contract() {
    let cfg = TextEncoderConfig {
        embed_dim: 128,
        ..TextEncoderConfig::desk(10)
    };
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let enc = TextEncoder::new(cfg, &mut r).unwrap();
    let batch = vec![vec![3, 4, 1], vec![5, 1], vec![3, 4, 1]];
    let out = enc.encode_batch(&batch).unwrap();
    assert_eq!(out.shape(), (3, 128));
    assert_eq!(out.row(0), out.row(2));
    let long = vec![3; 129];
    assert!(matches!(enc.encode_batch(&[long]), Err(Error::Contract(_))));
}

#[test]
fn encoder_is_permutation_equivariant() {
    let enc = micro_text(5, 2);
    let batch = vec![vec![3, 1], vec![4, 5, 1], vec![6, 1], vec![2, 2, 2, 1]];
    let perm = [2, 0, 3, 1];
    let out = enc.encode_batch(&batch).unwrap();
    let permuted: Vec<_> = perm.iter().map(|&i| batch[i].clone()).collect();
    let out_p = enc.encode_batch(&permuted).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(out_p.row(k), out.row(i));
    }
}

// ---------------------------------------------------------------------------
// GCN

fn gcn(d_in: usize, d_h: usize, d: usize, seed: u64) -> GraphEncoder {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    GraphEncoder::new(GraphEncoderConfig::new(d_in, d_h, d), &mut r).unwrap()
}

#[test]
fn isolated_node_uses_self_loop_only() {
    let enc = gcn(3, 4, 2, 1);
    let x = Matrix::row_vector(&[0.3, -1.0, 2.0]);
    let z = gcn_forward(&enc, &x, &[]).unwrap();
    let leaky = |m: Matrix| m.map(|v| if v > 0.0 { v } else { 0.01 * v });
    let expected = leaky(leaky(x.matmul(&enc.w1)).matmul(&enc.w2));
    assert!(z.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn connected_twins_get_identical_rows() {
    let enc = gcn(2, 3, 2, 2);
    let x = Matrix::from_rows(&[[0.4, -0.2], [0.4, -0.2]]).unwrap();
    let z = gcn_forward(&enc, &x, &[(0, 1)]).unwrap();
    assert_eq!(z.row(0), z.row(1));
}

#[test]
fn path_graph_hand_computed() {
    // x = [1, 2, 3], W1 = [2], W2 = [-1], slope 0.01, path 0-1-2.
    // Â = [[1/2, 1/√6, 0], [1/√6, 1/3, 1/√6], [0, 1/√6, 1/2]]
    // h = Â·x·2 = [1 + 4/√6, 4/√6 + 4/3, 4/√6 + 3] (all positive)
    // z = leaky(-Â·h)
    let mut enc = gcn(1, 1, 1, 0);
    enc.w1 = Matrix::scalar(2.0);
    enc.w2 = Matrix::scalar(-1.0);
    let x = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
    let z = gcn_forward(&enc, &x, &[(0, 1), (1, 2)]).unwrap();
    let expected = [-0.031_941_609_682_128_77, -0.044_994_330_475_368_65, -0.041_941_609_682_128_775];
    for (i, e) in expected.iter().enumerate() {
        assert!((z.get(i, 0) - e).abs() < 1e-12, "node {i}: {}", z.get(i, 0));
    }
    assert!(matches!(gcn_forward(&enc, &x, &[(0, 5)]), Err(Error::Lookup(_))));
}

#[test]
fn gcn_is_permutation_equivariant() {
    let enc = gcn(3, 4, 2, 3);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut r, 5, 3);
    let edges = vec![(0, 1), (1, 2), (2, 3), (0, 4), (1, 4)];
    let perm = [3, 0, 4, 1, 2]; // new position k holds old node perm[k]
    let mut inv = [0; 5];
    for (k, &o) in perm.iter().enumerate() {
        inv[o] = k;
    }
    let z = gcn_forward(&enc, &x, &edges).unwrap();
    let xp = x.select_rows(&perm);
    let ep: Vec<_> = edges.iter().map(|&(u, v)| (inv[u], inv[v])).collect();
    let zp = gcn_forward(&enc, &xp, &ep).unwrap();
    assert!(zp.max_abs_diff(&z.select_rows(&perm)) < 1e-12);
}

#[test]
fn subset_forward_matches_full_graph() {
    let enc = gcn(3, 4, 2, 4);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut r, 7, 3);
    let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 6)];
    let adj = NormalizedAdjacency::from_edges(7, &edges).unwrap();
    let full = enc.forward(&x, &adj).unwrap();
    let mut tape = Tape::new();
    let vars = enc.bind(&mut tape, false);
    let z = vars.forward_nodes(&mut tape, &x, &adj, &[5, 2]).unwrap();
    assert!(tape.value(z).max_abs_diff(&full.select_rows(&[5, 2])) < 1e-12);
}

// ---------------------------------------------------------------------------
// Normalisation

#[test]
fn normalisation_examples() {
    let m = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
    assert_eq!(row_l2_normalize(&m), Matrix::from_rows(&[[0.6, 0.8]]).unwrap());
    let unit = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    assert_eq!(row_l2_normalize(&unit), unit);
    let zero = Matrix::zeros(1, 2);
    assert_eq!(row_l2_normalize(&zero), zero);
}

proptest! {
    #[test]
    fn normalisation_is_idempotent(rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..6)) {
        let m = Matrix::from_rows(&rows).unwrap();
        let once = row_l2_normalize(&m);
        let twice = row_l2_normalize(&once);
        prop_assert!(once.max_abs_diff(&twice) < 1e-12);
        for (r, orig) in once.row_iter().zip(m.row_iter()) {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if orig.iter().any(|&v| v != 0.0) {
                prop_assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gradients against central differences (h = 1e-4, relative error < 1e-4)

fn probe(tape: &mut Tape, y: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let yw = tape.matmul(y, w);
    let ones = tape.constant(Matrix::filled(1, tape.value(yw).rows(), 1.0));
    tape.matmul(ones, yw)
}

#[test]
fn text_encoder_gradients_match_finite_differences() {
    let enc = micro_text(11, 2);
    let batch = vec![vec![3, 4, 1], vec![5, 6, 2, 1]];
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let weights = random(&mut r, 3, 1);
    let loss = |e: &TextEncoder| {
        let mut t = Tape::new();
        let v = e.bind(&mut t, true);
        let y = v.encode_tokens(&mut t, &batch).unwrap();
        let l = probe(&mut t, y, &weights);
        (t, v, l)
    };
    let (tape, vars, l) = loss(&enc);
    let grads = tape.backward(l);
    let names: Vec<String> = enc.named_params().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        if name.ends_with("log_temperature") {
            continue; // τ only enters through the similarity matrices
        }
        let base = enc.named_params()[k].1.clone();
        let numeric = central_difference(&base, 1e-4, |m| {
            let mut e = enc.clone();
            *e.params_mut()[k] = m.clone();
            let (t, _, l) = loss(&e);
            t.value(l).item()
        });
        let analytic = grads
            .get(vars.params[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(base.rows(), base.cols()));
        let err = tensor_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn graph_encoder_gradients_match_finite_differences() {
    let enc = gcn(3, 4, 3, 13);
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut r, 5, 3);
    let weights = random(&mut r, 3, 1);
    let adj = NormalizedAdjacency::from_edges(5, &[(0, 1), (1, 2), (3, 4), (0, 3)]).unwrap();
    let targets = [4, 1, 2];
    let run = |e: &GraphEncoder| {
        let mut t = Tape::new();
        let v = e.bind(&mut t, true);
        let z = v.forward_nodes(&mut t, &x, &adj, &targets).unwrap();
        let l = probe(&mut t, z, &weights);
        (t, v, l)
    };
    let (tape, vars, l) = run(&enc);
    let grads = tape.backward(l);
    for (k, var) in vars.params().into_iter().enumerate() {
        let base = enc.named_params()[k].1.clone();
        let numeric = central_difference(&base, 1e-4, |m| {
            let mut e = enc.clone();
            *e.params_mut()[k] = m.clone();
            let (t, _, l) = run(&e);
            t.value(l).item()
        });
        let err = tensor_relative_error(grads.get(var).unwrap(), &numeric);
        assert!(err < 1e-4, "w{}: relative error {err}", k + 1);
    }
}

#[test]
fn segments_are_consecutive() {
    assert_eq!(
        segments([2, 3]),
        vec![Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }]
    );
}
