//! Small corpora and encoders shared by unit tests.

use std::collections::BTreeMap;

use crate::corpus::{build_node_features, ClassId, Document, EmbeddingTable, FewShotTask, GraphTextCorpus};
use crate::encoders::{DualEncoder, EncoderConfig};

/// Two classes of six documents each with disjoint vocabularies, wired as two
/// rings, with 4-dimensional features.
pub(crate) fn two_class_corpus() -> GraphTextCorpus {
    let words = [["alpha", "beta", "gamma"], ["delta", "eps", "zeta"]];
    let mut docs = Vec::new();
    let mut labels = BTreeMap::new();
    for id in 0..12 {
        let c = id % 2;
        let w = &words[c];
        let text = format!("{} {} {} {}", w[id % 3], w[(id + 1) % 3], w[(id / 2) % 3], w[0]);
        docs.push(Document { id, text });
        labels.insert(id, c);
    }
    let mut edges = Vec::new();
    for c in 0..2 {
        let ring: Vec<usize> = (0..12).filter(|i| i % 2 == c).collect();
        for k in 0..ring.len() {
            edges.push((ring[k], ring[(k + 1) % ring.len()]));
        }
    }
    let class_texts: BTreeMap<ClassId, String> = [(0, "alpha".to_string()), (1, "delta".to_string())].into();
    let corpus = GraphTextCorpus::new(docs, edges, labels, class_texts).unwrap();
    let table = EmbeddingTable::random_for_corpus(&corpus, 4, 9);
    let feats = build_node_features(&corpus, &table, 4).unwrap();
    corpus.with_node_features(feats).unwrap()
}

pub(crate) fn micro_config(width: usize) -> EncoderConfig {
    EncoderConfig {
        width,
        layers: 2,
        heads: 2,
        embed_dim: 3,
        input_dim: 4,
        hidden_dim: 4,
        max_len: 12,
        mlp_ratio: 2,
        ..EncoderConfig::default()
    }
}

pub(crate) fn micro_encoder(corpus: &GraphTextCorpus, width: usize, seed: u64) -> DualEncoder {
    DualEncoder::new(DualEncoder::vocabulary_for(corpus), &micro_config(width), seed).unwrap()
}

/// 2-way 2-shot task over [`two_class_corpus`]: support 0, 2, 1, 3;
/// validation 4, 6, 5, 7; the rest is query.
pub(crate) fn micro_task() -> FewShotTask {
    FewShotTask {
        class_ids: vec![0, 1],
        support: vec![(0, 0), (2, 0), (1, 1), (3, 1)],
        validation: vec![(4, 0), (6, 0), (5, 1), (7, 1)],
        query: vec![(8, 0), (10, 0), (9, 1), (11, 1)],
    }
}
