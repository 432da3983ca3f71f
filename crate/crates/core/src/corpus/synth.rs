//! Synthetic graph-grounded corpora for desk-scale experiments.
//!
//! Vocabulary words are `w0 .. w{V-1}`. The first `n_classes · keywords_per_class`
//! words are class keywords (class `c` owns a contiguous block); the rest are
//! shared filler. A document of class `c` draws each token from `c`'s keywords
//! with probability `keyword_rate` and from the filler otherwise. The class label
//! text is the class keyword list.
//!
//! Every node draws `edges_per_node` partners; a partner is a same-class node
//! with probability `homophily` and a node of a different class otherwise, so
//! the mean degree stays constant as the corpus grows.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{build_node_features, ClassId, Document, EmbeddingTable, GraphTextCorpus};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub docs_per_class: usize,
    pub vocab_size: usize,
    pub keywords_per_class: usize,
    pub homophily: f64,
    pub seed: u64,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub keyword_rate: f64,
    pub edges_per_node: usize,
    /// Keyword rate used instead of `keyword_rate` by the upper half of the
    /// class ids, to induce a distribution shift between class groups.
    pub shifted_keyword_rate: Option<f64>,
    pub feature_dim: usize,
    pub feature_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            docs_per_class: 200,
            vocab_size: 300,
            keywords_per_class: 5,
            homophily: 0.9,
            seed: 1,
            min_doc_len: 12,
            max_doc_len: 20,
            keyword_rate: 0.4,
            edges_per_node: 3,
            shifted_keyword_rate: None,
            feature_dim: 32,
            feature_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn new(
        n_classes: usize,
        docs_per_class: usize,
        vocab_size: usize,
        keywords_per_class: usize,
        homophily: f64,
        seed: u64,
    ) -> Self {
        Self {
            n_classes,
            docs_per_class,
            vocab_size,
            keywords_per_class,
            homophily,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.docs_per_class == 0 {
            return bad("docs_per_class must be positive".into());
        }
        if self.keywords_per_class == 0 {
            return bad("keywords_per_class must be positive".into());
        }
        if self.keywords_per_class * self.n_classes > self.vocab_size {
            return bad(format!(
                "{} classes x {} keywords exceed the vocabulary of {}",
                self.n_classes, self.keywords_per_class, self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return bad(format!("homophily must lie in [0, 1], got {}", self.homophily));
        }
        for rate in std::iter::once(self.keyword_rate).chain(self.shifted_keyword_rate) {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("keyword rate must lie in [0, 1], got {rate}"));
            }
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            return bad(format!(
                "document length range {}..={} is empty",
                self.min_doc_len, self.max_doc_len
            ));
        }
        Ok(())
    }

    fn keyword_rate_for(&self, class: ClassId) -> f64 {
        match self.shifted_keyword_rate {
            Some(r) if class >= self.n_classes.div_ceil(2) => r,
            _ => self.keyword_rate,
        }
    }
}

/// Generates a corpus with uniform labels, keyword-bearing documents, a
/// homophilous graph and frozen random-embedding node features.
pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<GraphTextCorpus> {
    config.validate()?;
    let mut r = rng::stream(config.seed, rng::STREAM_CORPUS);
    let n = config.n_classes * config.docs_per_class;
    let k = config.keywords_per_class;
    let n_keywords = config.n_classes * k;
    let n_filler = config.vocab_size - n_keywords;

    let mut labels: Vec<ClassId> = (0..n).map(|i| i / config.docs_per_class).collect();
    labels.shuffle(&mut r);

    let mut documents = Vec::with_capacity(n);
    for (id, &class) in labels.iter().enumerate() {
        let len = r.gen_range(config.min_doc_len..=config.max_doc_len);
        let rate = config.keyword_rate_for(class);
        let tokens: Vec<String> = (0..len)
            .map(|_| {
                let w = if n_filler == 0 || r.gen_bool(rate) {
                    class * k + r.gen_range(0..k)
                } else {
                    n_keywords + r.gen_range(0..n_filler)
                };
                format!("w{w}")
            })
            .collect();
        documents.push(Document {
            id,
            text: tokens.join(" "),
        });
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.n_classes];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let mut edges = BTreeSet::new();
    for (i, &c) in labels.iter().enumerate() {
        for _ in 0..config.edges_per_node {
            let same = r.gen_bool(config.homophily);
            let j = if same {
                if members[c].len() < 2 {
                    continue;
                }
                loop {
                    let j = members[c][r.gen_range(0..members[c].len())];
                    if j != i {
                        break j;
                    }
                }
            } else {
                let other = (c + 1 + r.gen_range(0..config.n_classes - 1)) % config.n_classes;
                members[other][r.gen_range(0..members[other].len())]
            };
            edges.insert((i.min(j), i.max(j)));
        }
    }

    let class_texts: BTreeMap<ClassId, String> = (0..config.n_classes)
        .map(|c| {
            let text = (0..k).map(|j| format!("w{}", c * k + j)).collect::<Vec<_>>().join(" ");
            (c, text)
        })
        .collect();
    let label_map = labels.iter().copied().enumerate().collect();
    let corpus = GraphTextCorpus::new(documents, edges.into_iter().collect(), label_map, class_texts)?;
    let table = EmbeddingTable::random_for_corpus(&corpus, config.feature_dim, config.feature_seed);
    let features = build_node_features(&corpus, &table, config.feature_dim)?;
    corpus.with_node_features(features)
}
