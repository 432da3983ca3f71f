//! The dual encoders: a transformer over document tokens and a GCN over the
//! document graph, both mapping into the same `d`-dimensional space.

pub mod graph;
pub mod text;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use graph::{gcn_forward, GraphEncoder, GraphEncoderConfig, GraphVars, NormalizedAdjacency};
pub use text::{segments, TextEncoder, TextEncoderConfig, TextVars, MAX_TEMPERATURE_SCALE};
pub use vocab::{TokenId, TokenSeq, Vocabulary, EOS, PAD, UNK};

use crate::autograd::normalize_rows;
use crate::corpus::GraphTextCorpus;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::rng;
use crate::tensor::Matrix;

/// Scales every nonzero row to unit L2 norm; zero rows are returned unchanged.
pub fn row_l2_normalize(mat: &Matrix) -> Matrix {
    normalize_rows(mat).0
}

/// Pairwise cosine similarities between rows of `a` and rows of `b`; a zero
/// row has cosine 0 with everything.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    row_l2_normalize(a).matmul_nt(&row_l2_normalize(b))
}

/// Sizes of both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
    pub negative_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            embed_dim: 32,
            input_dim: 32,
            hidden_dim: 32,
            max_len: 128,
            mlp_ratio: 4,
            negative_slope: graph::DEFAULT_NEGATIVE_SLOPE,
        }
    }
}

impl EncoderConfig {
    /// 12 layers, 512 wide, 8 heads, 128-dimensional embeddings and GCN.
    pub fn full_scale() -> Self {
        Self {
            width: 512,
            layers: 12,
            heads: 8,
            embed_dim: 128,
            input_dim: 128,
            hidden_dim: 128,
            ..Self::default()
        }
    }

    pub fn text(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            embed_dim: self.embed_dim,
            max_len: self.max_len,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn graph(&self) -> GraphEncoderConfig {
        GraphEncoderConfig {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.embed_dim,
            negative_slope: self.negative_slope,
        }
    }
}

/// Vocabulary plus both encoders; the unit that pre-training produces and
/// every downstream method consumes frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub graph: GraphEncoder,
}

impl DualEncoder {
    /// Fresh encoders with parameters drawn from the `init` stream of `seed`.
    pub fn new(vocab: Vocabulary, config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::STREAM_INIT);
        let text = TextEncoder::new(config.text(vocab.len()), &mut r)?;
        let graph = GraphEncoder::new(config.graph(), &mut r)?;
        Self::from_parts(vocab, text, graph)
    }

    pub fn from_parts(vocab: Vocabulary, text: TextEncoder, graph: GraphEncoder) -> Result<Self> {
        if text.config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "text encoder has {} token embeddings for a vocabulary of {}",
                text.config.vocab_size,
                vocab.len()
            )));
        }
        if graph.output_dim() != text.embed_dim() {
            return Err(Error::Config(format!(
                "graph output dimension {} differs from text embedding dimension {}",
                graph.output_dim(),
                text.embed_dim()
            )));
        }
        Ok(Self { vocab, text, graph })
    }

    /// Vocabulary over the corpus documents and class label texts.
    pub fn vocabulary_for(corpus: &GraphTextCorpus) -> Vocabulary {
        Vocabulary::build(
            corpus
                .documents()
                .iter()
                .map(|d| d.text.as_str())
                .chain(corpus.class_texts().values().map(String::as_str)),
        )
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        self.vocab.tokenize(text, self.text.max_len())
    }

    /// Frozen GCN embeddings `z_i` for every node of `corpus`.
    pub fn node_embeddings(&self, corpus: &GraphTextCorpus) -> Result<Matrix> {
        if corpus.node_features().cols() != self.graph.config.input_dim {
            return Err(Error::Config(format!(
                "corpus features are {}-dimensional but the graph encoder expects {}",
                corpus.node_features().cols(),
                self.graph.config.input_dim
            )));
        }
        self.graph
            .forward(corpus.node_features(), &NormalizedAdjacency::from_corpus(corpus))
    }

    /// Text embeddings `t_i` for every document.
    pub fn text_embeddings(&self, corpus: &GraphTextCorpus) -> Result<Matrix> {
        let seqs: Vec<TokenSeq> = corpus.documents().iter().map(|d| self.tokenize(&d.text)).collect();
        self.text.encode_batch(&seqs)
    }
}

impl Parameters for DualEncoder {
    fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut v = self.text.named_params();
        v.extend(self.graph.named_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.text.params_mut();
        v.extend(self.graph.params_mut());
        v
    }
}

#[cfg(test)]
mod tests;
