use std::collections::HashMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng;

use super::{words, GraphTextCorpus};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

/// Maps a (lowercased) word to a fixed vector; unknown words map to `None`.
pub trait WordEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, word: &str) -> Option<&[f64]>;
}

#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Parameter(format!(
                "vector for {word:?} has length {} but the table is {}-dimensional",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.to_lowercase(), vector);
        Ok(())
    }

    /// A frozen random table over `vocabulary`. Each word's vector depends only
    /// on the word and `seed`, so the same word gets the same vector in every
    /// corpus.
    pub fn random<'a>(vocabulary: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Self {
        let mut table = Self::new(dim);
        let scale = (3.0 / dim.max(1) as f64).sqrt();
        for w in vocabulary {
            let w = w.to_lowercase();
            if table.vectors.contains_key(&w) {
                continue;
            }
            let mut h = FnvHasher::default();
            h.write(w.as_bytes());
            let mut r = rng::rng(rng::sub_seed(seed, &[h.finish()]));
            let v = (0..dim).map(|_| r.gen_range(-scale..scale)).collect();
            table.vectors.insert(w, v);
        }
        table
    }

    /// Random table over every word of the corpus documents and class texts.
    pub fn random_for_corpus(corpus: &GraphTextCorpus, dim: usize, seed: u64) -> Self {
        let mut vocab: Vec<String> = corpus
            .documents()
            .iter()
            .flat_map(|d| words(&d.text))
            .chain(corpus.class_texts().values().flat_map(|t| words(t)))
            .collect();
        vocab.sort_unstable();
        vocab.dedup();
        Self::random(vocab.iter().map(String::as_str), dim, seed)
    }
}

impl WordEmbedder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }
}

/// Row `i` is the mean word vector of document `i`; out-of-vocabulary words
/// contribute nothing and a document with no known words gets the zero row.
pub fn build_node_features(
    corpus: &GraphTextCorpus,
    embedder: &dyn WordEmbedder,
    d_in: usize,
) -> Result<Matrix> {
    if embedder.dim() != d_in {
        return Err(Error::Parameter(format!(
            "embedder produces {}-dimensional vectors but d_in = {d_in}",
            embedder.dim()
        )));
    }
    let mut out = Matrix::zeros(corpus.len(), d_in);
    for (i, doc) in corpus.documents().iter().enumerate() {
        let row = out.row_mut(i);
        let mut count = 0usize;
        for w in words(&doc.text) {
            if let Some(v) = embedder.embed(&w) {
                for (r, x) in row.iter_mut().zip(v) {
                    *r += x;
                }
                count += 1;
            }
        }
        if count > 0 {
            for r in row.iter_mut() {
                *r /= count as f64;
            }
        }
    }
    Ok(out)
}
