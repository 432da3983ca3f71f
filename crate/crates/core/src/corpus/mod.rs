//! Graph-grounded text corpora: documents that are also nodes of a graph.

mod features;
mod io;
mod synth;
mod task;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

pub use features::{build_node_features, EmbeddingTable, WordEmbedder};
pub use io::{read_corpus_dir, write_corpus_dir, CLASSES_FILE, DOCUMENTS_FILE, EDGES_FILE};
pub use synth::{generate_synthetic_corpus, SyntheticConfig};
pub use task::{sample_task, split_base_unseen, FewShotTask, SplitMode, SplitSpec};

pub type NodeId = usize;
pub type ClassId = usize;

/// Lowercased whitespace tokens; shared by the tokenizer and feature builder.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: NodeId,
    pub text: String,
}

/// Documents, their graph, node features, (partial) labels and class label texts.
///
/// Node `i` is document `i`. Edges are undirected, deduplicated and stored as
/// `(min, max)` pairs without self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTextCorpus {
    documents: Vec<Document>,
    edges: Vec<(NodeId, NodeId)>,
    node_features: Matrix,
    labels: BTreeMap<NodeId, ClassId>,
    class_texts: BTreeMap<ClassId, String>,
    neighbors: Vec<Vec<NodeId>>,
}

impl GraphTextCorpus {
    /// Validates and normalises the parts of a corpus. Node features start
    /// empty (`|D| × 0`); see [`GraphTextCorpus::with_node_features`].
    pub fn new(
        documents: Vec<Document>,
        edges: Vec<(NodeId, NodeId)>,
        labels: BTreeMap<NodeId, ClassId>,
        class_texts: BTreeMap<ClassId, String>,
    ) -> Result<Self> {
        let n = documents.len();
        for (i, d) in documents.iter().enumerate() {
            if d.id != i {
                return Err(Error::Parameter(format!(
                    "document at position {i} has id {}; ids must be 0..{n} in order",
                    d.id
                )));
            }
            if d.text.trim().is_empty() {
                return Err(Error::Parameter(format!("document {i} has empty text")));
            }
        }
        let mut set = BTreeSet::new();
        for &(u, v) in &edges {
            if u >= n || v >= n {
                return Err(Error::Lookup(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        for (&node, &class) in &labels {
            if node >= n {
                return Err(Error::Lookup(format!("label for unknown node {node}")));
            }
            if !class_texts.contains_key(&class) {
                return Err(Error::Lookup(format!(
                    "node {node} has class {class}, which has no label text"
                )));
            }
        }
        for (class, text) in &class_texts {
            if text.trim().is_empty() {
                return Err(Error::Parameter(format!("class {class} has empty label text")));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for adj in &mut neighbors {
            adj.sort_unstable();
        }
        Ok(Self {
            documents,
            edges,
            node_features: Matrix::zeros(n, 0),
            labels,
            class_texts,
            neighbors,
        })
    }

    pub fn with_node_features(mut self, features: Matrix) -> Result<Self> {
        self.set_node_features(features)?;
        Ok(self)
    }

    pub fn set_node_features(&mut self, features: Matrix) -> Result<()> {
        if features.rows() != self.documents.len() {
            return Err(Error::Shape(format!(
                "feature matrix has {} rows for {} nodes",
                features.rows(),
                self.documents.len()
            )));
        }
        self.node_features = features;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn text(&self, node: NodeId) -> Result<&str> {
        self.documents
            .get(node)
            .map(|d| d.text.as_str())
            .ok_or_else(|| Error::Lookup(format!("unknown node {node}")))
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn labels(&self) -> &BTreeMap<NodeId, ClassId> {
        &self.labels
    }

    pub fn label(&self, node: NodeId) -> Option<ClassId> {
        self.labels.get(&node).copied()
    }

    pub fn class_texts(&self) -> &BTreeMap<ClassId, String> {
        &self.class_texts
    }

    pub fn class_text(&self, class: ClassId) -> Result<&str> {
        self.class_texts
            .get(&class)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("unknown class {class}")))
    }

    pub fn neighbors(&self, node: NodeId) -> Result<&[NodeId]> {
        self.neighbors
            .get(node)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown node {node}")))
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.neighbors.get(node).map_or(0, Vec::len)
    }

    /// Classes that have at least one labelled node, ascending.
    pub fn labelled_classes(&self) -> Vec<ClassId> {
        self.labels
            .values()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Labelled nodes of `class`, ascending.
    pub fn nodes_of_class(&self, class: ClassId) -> Vec<NodeId> {
        self.labels
            .iter()
            .filter(|&(_, &c)| c == class)
            .map(|(&n, _)| n)
            .collect()
    }

    /// The corpus restricted to `nodes` (re-indexed in the given order), with
    /// only the edges between kept nodes. Returns the sub-corpus and the
    /// mapping from new ids to original ids.
    pub fn induced_subcorpus(&self, nodes: &[NodeId]) -> Result<(Self, Vec<NodeId>)> {
        let mut new_id = vec![usize::MAX; self.len()];
        for (k, &n) in nodes.iter().enumerate() {
            if n >= self.len() {
                return Err(Error::Lookup(format!("unknown node {n}")));
            }
            new_id[n] = k;
        }
        let documents = nodes
            .iter()
            .enumerate()
            .map(|(k, &n)| Document {
                id: k,
                text: self.documents[n].text.clone(),
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| new_id[u] != usize::MAX && new_id[v] != usize::MAX)
            .map(|&(u, v)| (new_id[u], new_id[v]))
            .collect();
        let labels = nodes
            .iter()
            .enumerate()
            .filter_map(|(k, n)| self.labels.get(n).map(|&c| (k, c)))
            .collect();
        let mut sub = Self::new(documents, edges, labels, self.class_texts.clone())?;
        if self.node_features.cols() > 0 {
            sub.set_node_features(self.node_features.select_rows(nodes))?;
        }
        Ok((sub, nodes.to_vec()))
    }
}

/// Up to `eta` distinct neighbours of `node`, drawn uniformly without
/// replacement. Nodes with degree ≤ `eta` return all their neighbours.
pub fn sample_neighbors(
    corpus: &GraphTextCorpus,
    node: NodeId,
    eta: usize,
    seed: u64,
) -> Result<Vec<NodeId>> {
    let adj = corpus.neighbors(node)?;
    if adj.len() <= eta {
        return Ok(adj.to_vec());
    }
    let mut r = rng::rng(seed);
    Ok(index::sample(&mut r, adj.len(), eta)
        .into_iter()
        .map(|i| adj[i])
        .collect())
}
