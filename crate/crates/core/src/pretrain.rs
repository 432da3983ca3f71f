//! Contrastive pre-training that aligns node, text and neighbourhood-summary
//! embeddings with three symmetric N-pair losses.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{SparseRows, Tape, Var};
use crate::corpus::{sample_neighbors, GraphTextCorpus, NodeId};
use crate::encoders::{DualEncoder, NormalizedAdjacency, TokenSeq, MAX_TEMPERATURE_SCALE};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::Parameters;
use crate::rng;
use crate::tensor::Matrix;

/// Which loss terms are optimised. `Full` is `L1 + λ(L2 + L3)`; the other two
/// isolate the node-text term and the summary terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Full,
    NodeTextOnly,
    SummaryOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub eta: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eta: 3,
            batch_size: 64,
            epochs: 2,
            learning_rate: 2e-5,
            seed: 0,
            objective: Objective::Full,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Weights on `(L1, L2, L3)`.
    pub fn loss_weights(&self) -> [f64; 3] {
        match self.objective {
            Objective::Full => [1.0, self.lambda, self.lambda],
            Objective::NodeTextOnly => [1.0, 0.0, 0.0],
            Objective::SummaryOnly => [0.0, 1.0, 1.0],
        }
    }
}

/// Text, node and summary embeddings for one batch, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub t: Matrix,
    pub z: Matrix,
    pub s: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub exp_tau: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: DualEncoder,
    pub history: Vec<LossRecord>,
}

/// Neighbour sample used for `node`'s summary under `seed`.
fn summary_neighbors(corpus: &GraphTextCorpus, node: NodeId, eta: usize, seed: u64) -> Result<Vec<NodeId>> {
    sample_neighbors(corpus, node, eta, rng::sub_seed(seed, &[node as u64]))
}

/// Row `i` is the mean text embedding over up to `eta` sampled neighbours of
/// `batch_nodes[i]`, or `t_i` itself for an isolated node.
pub fn summary_embeddings(
    t_all: &Matrix,
    corpus: &GraphTextCorpus,
    batch_nodes: &[NodeId],
    eta: usize,
    seed: u64,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(batch_nodes.len(), t_all.cols());
    for (r, &node) in batch_nodes.iter().enumerate() {
        let mut picked = summary_neighbors(corpus, node, eta, seed)?;
        if picked.is_empty() {
            picked.push(node);
        }
        if let Some(&bad) = picked.iter().find(|&&j| j >= t_all.rows()) {
            return Err(Error::Lookup(format!("no text embedding for node {bad}")));
        }
        let w = 1.0 / picked.len() as f64;
        for j in picked {
            for (o, v) in out.row_mut(r).iter_mut().zip(t_all.row(j)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

fn similarity_node(tape: &mut Tape, a: Var, b: Var, tau: Var) -> Var {
    let an = tape.row_l2_normalize(a);
    let bn = tape.row_l2_normalize(b);
    let cos = tape.matmul_nt(an, bn);
    tape.scale_by_exp(cos, tau, MAX_TEMPERATURE_SCALE)
}

/// Records `Λ1 = sim(Z,T)`, `Λ2 = sim(T,S)`, `Λ3 = sim(Z,S)`, their losses and
/// the weighted total on `tape`.
fn loss_graph(tape: &mut Tape, t: Var, z: Var, s: Var, tau: Var, weights: [f64; 3]) -> (Var, [Var; 3]) {
    let pairs = [(z, t), (t, s), (z, s)];
    let terms = pairs.map(|(a, b)| {
        let lambda = similarity_node(tape, a, b, tau);
        tape.symmetric_cross_entropy(lambda)
    });
    let total = tape.weighted_sum(terms.iter().copied().zip(weights).collect());
    (total, terms)
}

/// `cos(a_i, b_j) · exp(τ)` for every pair of rows.
pub fn similarity_matrix(a: &Matrix, b: &Matrix, tau: f64) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Parameter(format!(
            "similarity operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(crate::encoders::cosine_matrix(a, b).scale(tau.exp()))
}

/// `½ (CE(Λ, y) + CE(Λᵀ, y))` with `y_i = i`, mean-reduced.
pub fn npair_contrastive_loss(lambda: &Matrix) -> Result<f64> {
    if lambda.rows() != lambda.cols() || lambda.is_empty() {
        return Err(Error::Parameter(format!(
            "contrastive loss needs a nonempty square matrix, got {:?}",
            lambda.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(lambda.clone());
    let l = tape.symmetric_cross_entropy(x);
    Ok(tape.value(l).item())
}

fn check_batch(emb: &BatchEmbeddings) -> Result<()> {
    if emb.z.shape() != emb.t.shape() || emb.s.shape() != emb.t.shape() || emb.t.rows() == 0 {
        return Err(Error::Parameter(format!(
            "batch embeddings must share a nonempty shape: T {:?}, Z {:?}, S {:?}",
            emb.t.shape(),
            emb.z.shape(),
            emb.s.shape()
        )));
    }
    Ok(())
}

/// `L1 + λ(L2 + L3)` together with the individual terms.
pub fn pretrain_total_loss(emb: &BatchEmbeddings, tau: f64, lambda: f64) -> Result<LossBreakdown> {
    check_batch(emb)?;
    let mut tape = Tape::new();
    let t = tape.constant(emb.t.clone());
    let z = tape.constant(emb.z.clone());
    let s = tape.constant(emb.s.clone());
    let tau = tape.constant(Matrix::scalar(tau));
    let (total, terms) = loss_graph(&mut tape, t, z, s, tau, [1.0, lambda, lambda]);
    Ok(breakdown(&tape, total, terms))
}

fn breakdown(tape: &Tape, total: Var, [l1, l2, l3]: [Var; 3]) -> LossBreakdown {
    LossBreakdown {
        l1: tape.value(l1).item(),
        l2: tape.value(l2).item(),
        l3: tape.value(l3).item(),
        total: tape.value(total).item(),
    }
}

/// Gradient of the total loss with respect to each input of
/// [`pretrain_total_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub t: Matrix,
    pub z: Matrix,
    pub s: Matrix,
    pub tau: f64,
}

/// [`pretrain_total_loss`] and its gradients.
pub fn pretrain_loss_gradients(emb: &BatchEmbeddings, tau: f64, lambda: f64) -> Result<(LossBreakdown, LossGradients)> {
    check_batch(emb)?;
    let mut tape = Tape::new();
    let t = tape.param(emb.t.clone());
    let z = tape.param(emb.z.clone());
    let s = tape.param(emb.s.clone());
    let tau = tape.param(Matrix::scalar(tau));
    let (total, terms) = loss_graph(&mut tape, t, z, s, tau, [1.0, lambda, lambda]);
    let mut grads = tape.backward(total);
    let mut take = |v| grads.take(v).expect("inputs are parameters");
    let g = LossGradients {
        t: take(t),
        z: take(z),
        s: take(s),
        tau: take(tau).item(),
    };
    Ok((breakdown(&tape, total, terms), g))
}

/// Trains both encoders and `τ` on `corpus`. Each epoch reshuffles the
/// documents and resamples summary neighbours; a trailing batch of one
/// document is skipped.
pub fn pretrain(corpus: &GraphTextCorpus, encoder: DualEncoder, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Parameter("cannot pre-train on an empty corpus".into()));
    }
    if corpus.node_features().cols() != encoder.graph.config.input_dim {
        return Err(Error::Config(format!(
            "corpus features are {}-dimensional but the graph encoder expects {}",
            corpus.node_features().cols(),
            encoder.graph.config.input_dim
        )));
    }
    let mut encoder = encoder;
    let mut history = Vec::new();
    if config.epochs == 0 {
        return Ok(PretrainOutcome { encoder, history });
    }

    let tokens: Vec<TokenSeq> = corpus.documents().iter().map(|d| encoder.tokenize(&d.text)).collect();
    let adjacency = NormalizedAdjacency::from_corpus(corpus);
    let weights = config.loss_weights();
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &encoder.shapes());
    let mut batching = rng::stream(config.seed, rng::STREAM_BATCHING);
    let neighbor_seed = rng::derive_seed(config.seed, rng::STREAM_NEIGHBORS);
    let max_tau = MAX_TEMPERATURE_SCALE.ln();
    let mut order: Vec<NodeId> = (0..corpus.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut batching);
        let epoch_seed = rng::sub_seed(neighbor_seed, &[epoch as u64]);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let text = encoder.text.bind(&mut tape, true);
            let graph = encoder.graph.bind(&mut tape, true);

            // batch nodes first, then any extra sampled neighbours
            let mut union: Vec<NodeId> = batch.to_vec();
            let mut position = std::collections::HashMap::new();
            for (p, &i) in batch.iter().enumerate() {
                position.insert(i, p);
            }
            let mut summary_rows = Vec::with_capacity(batch.len());
            for &i in batch {
                let picked = summary_neighbors(corpus, i, config.eta, epoch_seed)?;
                let row: Vec<(usize, f64)> = if picked.is_empty() {
                    vec![(position[&i], 1.0)]
                } else {
                    let w = 1.0 / picked.len() as f64;
                    picked
                        .into_iter()
                        .map(|j| {
                            let p = *position.entry(j).or_insert_with(|| {
                                union.push(j);
                                union.len() - 1
                            });
                            (p, w)
                        })
                        .collect()
                };
                summary_rows.push(row);
            }

            let seqs: Vec<TokenSeq> = union.iter().map(|&i| tokens[i].clone()).collect();
            let t_union = text.encode_tokens(&mut tape, &seqs)?;
            let t = tape.gather(t_union, (0..batch.len()).collect());
            let s = tape.sparse(t_union, Arc::new(SparseRows::new(summary_rows)));
            let z = graph.forward_nodes(&mut tape, corpus.node_features(), &adjacency, batch)?;
            let tau = text.log_temperature();
            let (total, terms) = loss_graph(&mut tape, t, z, s, tau, weights);

            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pre-training loss is {value} at epoch {epoch}, batch {b}"
                )));
            }
            history.push(LossRecord {
                epoch,
                batch: b,
                l1: tape.value(terms[0]).item(),
                l2: tape.value(terms[1]).item(),
                l3: tape.value(terms[2]).item(),
                total: value,
                exp_tau: encoder.text.tau().exp(),
            });

            let grads = tape.backward(total);
            let vars: Vec<Var> = text.params.iter().copied().chain(graph.params()).collect();
            let slots: Vec<Option<&Matrix>> = vars.iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut encoder.params_mut(), &slots);
            let lt = &mut encoder.text.log_temperature;
            if lt.item() > max_tau {
                *lt = Matrix::scalar(max_tau);
            }
        }
    }
    Ok(PretrainOutcome { encoder, history })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::corpus::Document;
    use crate::encoders::EncoderConfig;
    use crate::gradcheck::{central_difference, tensor_relative_error};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let a = m(&[&[1.0, 0.0]]);
        assert!((similarity_matrix(&a, &a, 0.0).unwrap().item() - 1.0).abs() < 1e-12);
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let s = similarity_matrix(&a, &b, 2f64.ln()).unwrap();
        assert!(s.max_abs_diff(&m(&[&[1.2, 2.0], &[1.6, 0.0]])) < 1e-9);
        let s = similarity_matrix(&a, &a, 1.3).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        assert!(matches!(similarity_matrix(&a, &b.select_rows(&[0]), 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn npair_examples() {
        assert!(npair_contrastive_loss(&m(&[&[5.0]])).unwrap().abs() < 1e-12);
        // closed form: each row's softmax puts e/(e+1) on the target
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        let got = npair_contrastive_loss(&Matrix::identity(2)).unwrap();
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 0.313_262).abs() < 1e-6);
        let uniform = Matrix::filled(2, 2, 0.7);
        assert!((npair_contrastive_loss(&uniform).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(matches!(npair_contrastive_loss(&Matrix::zeros(2, 3)), Err(Error::Parameter(_))));
    }

    fn random_emb(seed: u64, n: usize, d: usize) -> BatchEmbeddings {
        use rand::Rng;
        let mut r = rng::rng(seed);
        let mut g = |_| Matrix::from_vec(n, d, (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        BatchEmbeddings { t: g(0), z: g(1), s: g(2) }
    }

    #[test]
    fn total_loss_combines_terms() {
        let emb = random_emb(3, 4, 3);
        let zero = pretrain_total_loss(&emb, 0.4, 0.0).unwrap();
        assert_eq!(zero.total, zero.l1);
        let full = pretrain_total_loss(&emb, 0.4, 0.1).unwrap();
        assert!((full.total - (full.l1 + 0.1 * (full.l2 + full.l3))).abs() < 1e-12);
        let same = BatchEmbeddings { t: emb.t.clone(), z: emb.t.clone(), s: emb.t.clone() };
        let same = pretrain_total_loss(&same, 0.4, 1.0).unwrap();
        assert!((same.total - 3.0 * same.l1).abs() < 1e-12);
    }

    fn mean_rows(t: &Matrix, rows: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; t.cols()];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v / rows.len() as f64;
            }
        }
        out
    }

    fn corpus(n: usize, edges: Vec<(usize, usize)>) -> GraphTextCorpus {
        let docs = (0..n).map(|id| Document { id, text: format!("doc w{id}") }).collect();
        GraphTextCorpus::new(docs, edges, BTreeMap::new(), BTreeMap::new()).unwrap()
    }

    #[test]
    fn summary_examples() {
        let t = m(&[&[1.0, 0.0], &[0.0, 1.0], &[3.0, 3.0], &[-1.0, 2.0]]);
        let c = corpus(4, vec![(0, 1), (0, 2), (1, 2)]);
        // node 3 is isolated; node 0 has neighbours 1 and 2
        let s = summary_embeddings(&t, &c, &[3, 0], 5, 0).unwrap();
        assert_eq!(s.row(0), t.row(3));
        assert_eq!(s.row(1), mean_rows(&t, &[1, 2]).as_slice());
        let c = corpus(4, vec![(0, 1), (1, 2)]);
        let s = summary_embeddings(&t, &c, &[0], 3, 0).unwrap();
        assert_eq!(s.row(0), t.row(1));
        let c2 = corpus(4, vec![(0, 1), (0, 3)]);
        let t2 = m(&[&[9.0, 9.0], &[1.0, 0.0], &[7.0, 7.0], &[0.0, 1.0]]);
        let s = summary_embeddings(&t2, &c2, &[0], 2, 0).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!(matches!(
            summary_embeddings(&t.select_rows(&[0]), &c2, &[0], 2, 0),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn summary_samples_exactly_eta_neighbours() {
        use rand::Rng;
        let mut r = rng::rng(1);
        let t = Matrix::from_vec(6, 3, (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = corpus(6, (1..6).map(|j| (0, j)).collect());
        let s = summary_embeddings(&t, &c, &[0], 3, 42).unwrap();
        // the result must be the mean of one of the C(5,3) neighbour triples
        let mut matches = 0;
        for a in 1..6 {
            for b in a + 1..6 {
                for d in b + 1..6 {
                    let mean = mean_rows(&t, &[a, b, d]);
                    if mean.iter().zip(s.row(0)).all(|(x, y)| (x - y).abs() < 1e-12) {
                        matches += 1;
                    }
                }
            }
        }
        assert_eq!(matches, 1);
        assert_eq!(s, summary_embeddings(&t, &c, &[0], 3, 42).unwrap());
    }

    fn matrix_strategy(n: usize, d: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| Matrix::from_vec(n, d, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn losses_are_permutation_invariant(
            (t, z, s) in (2usize..6, 1usize..4).prop_flat_map(|(n, d)| (matrix_strategy(n, d), matrix_strategy(n, d), matrix_strategy(n, d))),
            tau in -1.0f64..3.0,
            rot in 0usize..5,
        ) {
            let n = t.rows();
            let perm: Vec<usize> = (0..n).map(|i| (i * (2 * rot + 1) + rot) % n).collect();
            let mut seen = perm.clone();
            seen.sort_unstable();
            prop_assume!(seen == (0..n).collect::<Vec<_>>());
            let a = pretrain_total_loss(&BatchEmbeddings { t: t.clone(), z: z.clone(), s: s.clone() }, tau, 0.3).unwrap();
            let b = pretrain_total_loss(&BatchEmbeddings { t: t.select_rows(&perm), z: z.select_rows(&perm), s: s.select_rows(&perm) }, tau, 0.3).unwrap();
            prop_assert!((a.l1 - b.l1).abs() < 1e-6);
            prop_assert!((a.l2 - b.l2).abs() < 1e-6);
            prop_assert!((a.l3 - b.l3).abs() < 1e-6);
        }

        #[test]
        fn npair_loss_is_transpose_symmetric(x in (1usize..6).prop_flat_map(|n| matrix_strategy(n, n))) {
            let a = npair_contrastive_loss(&x).unwrap();
            let b = npair_contrastive_loss(&x.transpose()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn similarity_ignores_row_scale(
            (a, b) in (1usize..5, 1usize..4).prop_flat_map(|(n, d)| (matrix_strategy(n, d), matrix_strategy(n, d))),
            scales in proptest::collection::vec(0.01f64..100.0, 10),
            tau in -1.0f64..4.0,
        ) {
            let scale = |m: &Matrix, off: usize| {
                let mut out = m.clone();
                for r in 0..m.rows() {
                    let c = scales[(r + off) % scales.len()];
                    out.row_mut(r).iter_mut().for_each(|v| *v *= c);
                }
                out
            };
            let x = similarity_matrix(&a, &b, tau).unwrap();
            let y = similarity_matrix(&scale(&a, 0), &scale(&b, 5), tau).unwrap();
            prop_assert!(x.max_abs_diff(&y) < 1e-6);
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let emb = random_emb(7, 4, 3);
        let tau0 = 0.8;
        let lambda = 0.3;
        let inputs = [emb.t.clone(), emb.z.clone(), emb.s.clone(), Matrix::scalar(tau0)];
        let (loss, g) = pretrain_loss_gradients(&emb, tau0, lambda).unwrap();
        assert_eq!(loss, pretrain_total_loss(&emb, tau0, lambda).unwrap());
        let analytic = [g.t, g.z, g.s, Matrix::scalar(g.tau)];
        for k in 0..4 {
            let numeric = central_difference(&inputs[k], 1e-4, |x| {
                let mut parts = inputs.clone();
                parts[k] = x.clone();
                let emb = BatchEmbeddings { t: parts[0].clone(), z: parts[1].clone(), s: parts[2].clone() };
                pretrain_total_loss(&emb, parts[3].item(), lambda).unwrap().total
            });
            let err = tensor_relative_error(&analytic[k], &numeric);
            assert!(err < 1e-4, "input {k}: relative error {err}");
        }
    }

    #[test]
    fn aligned_loss_falls_with_tau() {
        let eye = Matrix::identity(3);
        let emb = BatchEmbeddings { t: eye.clone(), z: eye.clone(), s: eye };
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let tau = k as f64 * 0.1;
            let l = pretrain_total_loss(&emb, tau, 0.1).unwrap().total;
            // the loss eventually underflows to exactly zero
            assert!(l < prev || l == 0.0, "tau {tau}: {l} ≥ {prev}");
            prev = l;
        }
    }

    /// Two cliques of three documents with disjoint vocabularies.
    fn two_class_corpus() -> GraphTextCorpus {
        let texts = ["alpha beta gamma", "beta gamma alpha", "gamma alpha beta", "delta eps zeta", "eps zeta delta", "zeta delta eps"];
        let docs = texts.iter().enumerate().map(|(id, t)| Document { id, text: t.to_string() }).collect();
        let edges = vec![(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
        let c = GraphTextCorpus::new(docs, edges, BTreeMap::new(), BTreeMap::new()).unwrap();
        let table = crate::corpus::EmbeddingTable::random_for_corpus(&c, 8, 3);
        let feats = crate::corpus::build_node_features(&c, &table, 8).unwrap();
        c.with_node_features(feats).unwrap()
    }

    fn micro_encoder(c: &GraphTextCorpus) -> DualEncoder {
        let cfg = EncoderConfig {
            width: 8,
            layers: 1,
            heads: 2,
            embed_dim: 4,
            input_dim: 8,
            hidden_dim: 8,
            max_len: 8,
            ..EncoderConfig::default()
        };
        DualEncoder::new(DualEncoder::vocabulary_for(c), &cfg, 5).unwrap()
    }

    #[test]
    fn single_batch_loss_decreases() {
        let c = two_class_corpus();
        let cfg = PretrainConfig { batch_size: 6, epochs: 8, learning_rate: 1e-2, eta: 2, ..PretrainConfig::default() };
        let out = pretrain(&c, micro_encoder(&c), &cfg).unwrap();
        assert_eq!(out.history.len(), 8);
        for w in out.history.windows(2) {
            assert!(w[1].total < w[0].total, "{:?} then {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let c = two_class_corpus();
        let enc = micro_encoder(&c);
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let out = pretrain(&c, enc.clone(), &cfg).unwrap();
        assert_eq!(out.encoder, enc);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_drops_singleton_batches() {
        let c = two_class_corpus();
        let cfg = PretrainConfig { batch_size: 5, epochs: 2, learning_rate: 1e-3, ..PretrainConfig::default() };
        let a = pretrain(&c, micro_encoder(&c), &cfg).unwrap();
        let b = pretrain(&c, micro_encoder(&c), &cfg).unwrap();
        assert_eq!(a.encoder.fingerprint(), b.encoder.fingerprint());
        assert_eq!(a.history, b.history);
        // 6 documents in batches of 5 leave a trailing batch of one
        assert_eq!(a.history.len(), 2);
        let cfg = PretrainConfig { batch_size: 4, ..cfg };
        assert_eq!(pretrain(&c, micro_encoder(&c), &cfg).unwrap().history.len(), 4);
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let c = two_class_corpus();
        let mut feats = c.node_features().clone();
        feats.set(0, 0, f64::NAN);
        let c = c.with_node_features(feats).unwrap();
        let cfg = PretrainConfig { batch_size: 6, epochs: 1, ..PretrainConfig::default() };
        match pretrain(&c, micro_encoder(&c), &cfg) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("batch 0"), "{msg}"),
            other => panic!("expected a numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let c = two_class_corpus();
        let cfg = PretrainConfig { batch_size: 1, ..PretrainConfig::default() };
        assert!(matches!(pretrain(&c, micro_encoder(&c), &cfg), Err(Error::Parameter(_))));
    }
}
