use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::corpus::Document;
use crate::gradcheck::{central_difference, tensor_relative_error};
use crate::params::Parameters;
use crate::testing::{micro_encoder, micro_task, two_class_corpus};

#[test]
fn templates_need_exactly_one_placeholder() {
    assert!(DiscretePromptTemplate::new("[CLASS]").is_ok());
    let t = DiscretePromptTemplate::new("a paper about [CLASS] .").unwrap();
    assert_eq!(t.fill("graphs"), "a paper about graphs .");
    assert!(matches!(DiscretePromptTemplate::new("no slot"), Err(Error::Template(_))));
    assert!(matches!(DiscretePromptTemplate::new("[CLASS] and [CLASS]"), Err(Error::Template(_))));
    let parsed = DiscretePromptTemplate::parse_lines("[CLASS]\n\n  about [CLASS]  \n").unwrap();
    assert_eq!(parsed.len(), 2);
    assert_eq!(parsed[1].as_str(), "about [CLASS]");
    assert!(DiscretePromptTemplate::parse_lines("[CLASS]\nbroken").is_err());
}

#[test]
fn discrete_weights_encode_filled_templates() {
    let c = two_class_corpus();
    let enc = micro_encoder(&c, 8, 1);
    let bare = DiscretePromptTemplate::default();
    let w = class_weights_discrete(&enc, &bare, c.class_texts(), &[1, 0]).unwrap();
    assert_eq!(w.shape(), (2, 3));
    let direct = enc.text.encode_batch(&[enc.tokenize("delta"), enc.tokenize("alpha")]).unwrap();
    assert!(w.max_abs_diff(&row_l2_normalize(&direct)) < 1e-15);

    let same: BTreeMap<ClassId, String> = (0..5).map(|c| (c, "beta".to_string())).collect();
    let t = DiscretePromptTemplate::new("about [CLASS]").unwrap();
    let w = class_weights_discrete(&enc, &t, &same, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(w.shape(), (5, 3));
    assert_eq!(w.row(0), w.row(3));
    assert!(matches!(class_weights_discrete(&enc, &t, &same, &[7]), Err(Error::Lookup(_))));
}

#[test]
fn classify_examples() {
    let e = std::f64::consts::E;
    let p = classify(&[1.0, 0.0], &Matrix::identity(2));
    assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((p[0] - 0.7311).abs() < 1e-4);

    let w = Matrix::filled(4, 3, 0.5);
    for v in classify(&[0.3, -1.0, 2.0], &w) {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let w = Matrix::from_rows(&[[0.9, 0.19f64.sqrt(), 0.0], [0.1, 0.99f64.sqrt(), 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let p = classify(&[1.0, 0.0, 0.0], &w);
    let z: f64 = [0.9f64, 0.1, 0.0].iter().map(|v| v.exp()).sum();
    for (got, cos) in p.iter().zip([0.9f64, 0.1, 0.0]) {
        assert!((got - cos.exp() / z).abs() < 1e-12);
    }
    assert_eq!(argmax(&p), 0);

    assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    let zero = classify(&[0.0, 0.0], &Matrix::identity(2));
    assert_eq!(zero, vec![0.5, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prediction_ignores_positive_rescaling(
        z in proptest::collection::vec(-1.0f64..1.0, 3),
        w in proptest::collection::vec(-1.0f64..1.0, 12),
        scale in 1e-3f64..1e3,
    ) {
        let w = Matrix::from_vec(4, 3, w).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
        prop_assert_eq!(argmax(&classify(&z, &w)), argmax(&classify(&scaled, &w)));
    }
}

#[test]
fn context_init_of_isolated_singleton() {
    let docs = vec![
        Document { id: 0, text: "beta alpha".into() },
        Document { id: 1, text: "gamma".into() },
    ];
    let labels = [(0, 0)].into();
    let classes = [(0, "alpha".to_string())].into();
    let c = GraphTextCorpus::new(docs, vec![], labels, classes).unwrap();
    let enc = micro_encoder(&c, 4, 2);
    let task = FewShotTask {
        class_ids: vec![0],
        support: vec![(0, 0)],
        validation: vec![],
        query: vec![],
    };
    let h = init_prompt_from_context(&c, &task, &enc, 3, 3, 0).unwrap();
    let ids = [enc.vocab.id("beta"), enc.vocab.id("alpha"), PAD];
    assert_eq!(h, enc.text.embed_tokens(&ids));
    let empty = FewShotTask { support: vec![], ..task };
    assert!(matches!(init_prompt_from_context(&c, &empty, &enc, 3, 3, 0), Err(Error::Contract(_))));
}

#[test]
fn context_init_averages_support_and_neighbours() {
    // 25 support documents "a", each with four neighbours reading "b"
    let n_support = 25;
    let mut docs: Vec<Document> = (0..n_support).map(|id| Document { id, text: "a".into() }).collect();
    let mut edges = Vec::new();
    for s in 0..n_support {
        for _ in 0..4 {
            let id = docs.len();
            docs.push(Document { id, text: "b b".into() });
            edges.push((s, id));
        }
    }
    let labels: BTreeMap<_, _> = (0..n_support).map(|i| (i, i % 5)).collect();
    let classes: BTreeMap<_, _> = (0..5).map(|c| (c, format!("c{c}"))).collect();
    let c = GraphTextCorpus::new(docs, edges, labels, classes).unwrap();
    let mut enc = micro_encoder(&c, 4, 3);
    let (a, b) = (enc.vocab.id("a"), enc.vocab.id("b"));
    enc.text.token_embedding.row_mut(a).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    enc.text.token_embedding.row_mut(b).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    enc.text.token_embedding.row_mut(PAD).copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
    let task = FewShotTask {
        class_ids: (0..5).collect(),
        support: (0..n_support).map(|i| (i, i % 5)).collect(),
        validation: vec![],
        query: vec![],
    };
    // 25 · (3 + 1) = 100 sequences: 25 "a <pad>" and 75 "b b"
    let h = init_prompt_from_context(&c, &task, &enc, 2, 3, 11).unwrap();
    let expected = Matrix::from_rows(&[[0.25, 0.75, 0.0, 0.0], [0.0, 0.75, 0.25, 0.0]]).unwrap();
    assert!(h.max_abs_diff(&expected) < 1e-12);
    // without context only the support documents count
    let h0 = init_prompt_from_context(&c, &task, &enc, 2, 0, 11).unwrap();
    let expected = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]).unwrap();
    assert!(h0.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn two_hand_set_sequences_average_position_wise() {
    let docs = vec![
        Document { id: 0, text: "x y".into() },
        Document { id: 1, text: "y".into() },
    ];
    let c = GraphTextCorpus::new(docs, vec![(0, 1)], [(0, 0)].into(), [(0, "x".to_string())].into()).unwrap();
    let mut enc = micro_encoder(&c, 4, 4);
    let (x, y) = (enc.vocab.id("x"), enc.vocab.id("y"));
    enc.text.token_embedding.row_mut(x).copy_from_slice(&[2.0, 0.0, 4.0, 0.0]);
    enc.text.token_embedding.row_mut(y).copy_from_slice(&[0.0, 6.0, 0.0, 2.0]);
    enc.text.token_embedding.row_mut(PAD).copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
    let task = FewShotTask {
        class_ids: vec![0],
        support: vec![(0, 0)],
        validation: vec![],
        query: vec![],
    };
    let h = init_prompt_from_context(&c, &task, &enc, 2, 1, 0).unwrap();
    // "x y" and "y <pad>"
    let expected = Matrix::from_rows(&[[1.0, 3.0, 2.0, 1.0], [0.5, 3.5, 0.5, 1.5]]).unwrap();
    assert_eq!(h, expected);
}

fn micro_prompt(enc: &DualEncoder, c: &GraphTextCorpus, m: usize) -> PromptState {
    PromptState::for_classes(enc, random_prompt(m, enc.text.width(), 5), c.class_texts()).unwrap()
}

#[test]
fn continuous_weights_follow_the_sequence() {
    let c = two_class_corpus();
    let enc = micro_encoder(&c, 8, 5);
    let mut p = micro_prompt(&enc, &c, 4);
    assert_eq!(p.class_tokens[&0].rows(), 2); // "alpha" + <eos>
    let w = class_weights_continuous(&enc.text, &p, &[0, 1]).unwrap();
    assert_eq!(w.shape(), (2, 3));
    let direct = enc.text.encode_embedded(&p.sequence(1).unwrap()).unwrap();
    assert!(w.row(1).iter().zip(direct.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));

    p.class_tokens.insert(1, p.class_tokens[&0].clone());
    let w = class_weights_continuous(&enc.text, &p, &[0, 1]).unwrap();
    assert_eq!(w.row(0), w.row(1));

    let long = PromptState { tokens: Matrix::zeros(11, 8), ..p.clone() };
    assert!(matches!(class_weights_continuous(&enc.text, &long, &[0]), Err(Error::Contract(_))));
    assert!(matches!(class_weights_continuous(&enc.text, &p, &[9]), Err(Error::Lookup(_))));
}

#[test]
fn full_scale_prompt_has_2048_parameters() {
    let p = PromptState { tokens: Matrix::zeros(4, 512), class_tokens: BTreeMap::new() };
    assert_eq!(p.param_count(), 2048);
}

#[test]
fn tape_weights_match_inference_weights() {
    let c = two_class_corpus();
    let enc = micro_encoder(&c, 8, 6);
    let p = micro_prompt(&enc, &c, 3);
    let mut tape = Tape::new();
    let text = enc.text.bind(&mut tape, false);
    let h = tape.constant(p.tokens.clone());
    let (stack, spans) = p.class_stack(&[1, 0]).unwrap();
    let stack = tape.constant(stack);
    let w = prompted_weights(&mut tape, &text, &[h], stack, &spans).unwrap();
    let direct = class_weights_continuous(&enc.text, &p, &[1, 0]).unwrap();
    assert!(tape.value(w).max_abs_diff(&direct) < 1e-12);
}

#[test]
fn prompt_gradients_match_finite_differences() {
    let c = two_class_corpus();
    let enc = micro_encoder(&c, 4, 7);
    let z = enc.node_embeddings(&c).unwrap();
    // unit-scale context vectors keep the difference quotient well conditioned
    let p = PromptState { tokens: random_prompt(2, 4, 5).scale(50.0), ..micro_prompt(&enc, &c, 2) };
    let task = micro_task();
    let (_, analytic) = prompt_objective(&enc, &z, &task.class_ids, &task.support, &p).unwrap();
    let numeric = central_difference(&p.tokens, 1e-4, |h| {
        let q = PromptState { tokens: h.clone(), ..p.clone() };
        prompt_objective(&enc, &z, &task.class_ids, &task.support, &q).unwrap().0
    });
    for m in 0..p.m() {
        let err = tensor_relative_error(&analytic.select_rows(&[m]), &numeric.select_rows(&[m]));
        assert!(err < 1e-4, "h_{m}: relative error {err}");
    }
}

#[test]
fn tuning_descends_and_freezes_encoders() {
    let c = two_class_corpus();
    let enc = micro_encoder(&c, 8, 8);
    let before = enc.fingerprint();
    let z = enc.node_embeddings(&c).unwrap();
    let p = micro_prompt(&enc, &c, 4);
    let task = micro_task();
    let cfg = TuneConfig { learning_rate: 0.01, steps: 50 };
    let tuned = tune_prompt(&enc, &z, &task, p.clone(), &cfg).unwrap();
    assert_eq!(enc.fingerprint(), before);
    assert_eq!(tuned.history.len(), 51);
    assert!(tuned.history[50].support_loss < tuned.history[0].support_loss);
    assert_eq!(tuned.prompt.class_tokens, p.class_tokens);
    let best = tuned.history[tuned.best_step];
    assert!(tuned.history.iter().all(|r| r.validation_accuracy <= best.validation_accuracy));

    let none = tune_prompt(&enc, &z, &task, p.clone(), &TuneConfig { steps: 0, ..cfg.clone() }).unwrap();
    assert_eq!(none.prompt, p);
    assert_eq!(none.best_step, 0);
}

#[test]
fn tuning_rejects_non_finite_inputs() {
    let c = two_class_corpus();
    let enc = micro_encoder(&c, 4, 9);
    let mut z = enc.node_embeddings(&c).unwrap();
    z.set(0, 0, f64::NAN);
    let p = micro_prompt(&enc, &c, 2);
    let cfg = TuneConfig { learning_rate: 0.01, steps: 3 };
    assert!(matches!(tune_prompt(&enc, &z, &micro_task(), p, &cfg), Err(Error::NonFinite(_))));
}
