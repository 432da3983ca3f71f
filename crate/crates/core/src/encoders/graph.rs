//! Two-layer GCN: `Z = LeakyReLU(Â · LeakyReLU(Â · X · W1) · W2)` with
//! `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::text::uniform;
use crate::autograd::{SparseRows, Tape, Var};
use crate::corpus::{GraphTextCorpus, NodeId};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Matrix;

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub negative_slope: f64,
}

impl GraphEncoderConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEncoder {
    pub config: GraphEncoderConfig,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Symmetrically normalised adjacency with self-loops, stored as neighbour lists.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    neighbors: Vec<Vec<NodeId>>,
    inv_sqrt_degree: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_edges(n: usize, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Lookup(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u != v {
                sets[u].insert(v);
                sets[v].insert(u);
            }
        }
        let neighbors: Vec<Vec<NodeId>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let inv_sqrt_degree = neighbors
            .iter()
            .map(|a| 1.0 / ((a.len() + 1) as f64).sqrt())
            .collect();
        Ok(Self {
            neighbors,
            inv_sqrt_degree,
        })
    }

    pub fn from_corpus(corpus: &GraphTextCorpus) -> Self {
        Self::from_edges(corpus.len(), corpus.edges()).expect("corpus edges are validated")
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// `(j, Â_ij)` for `j ∈ {i} ∪ N(i)`.
    fn row(&self, i: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        let di = self.inv_sqrt_degree[i];
        std::iter::once((i, di * di)).chain(
            self.neighbors[i]
                .iter()
                .map(move |&j| (j, di * self.inv_sqrt_degree[j])),
        )
    }

    /// The rows of `Â` for `targets`, with columns renumbered to positions in
    /// the returned source list (`targets ∪ N(targets)`, ascending).
    fn restrict(&self, targets: &[NodeId]) -> (SparseRows, Vec<NodeId>) {
        let sources: Vec<NodeId> = targets
            .iter()
            .flat_map(|&t| std::iter::once(t).chain(self.neighbors[t].iter().copied()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let rows = targets
            .iter()
            .map(|&t| {
                self.row(t)
                    .map(|(j, w)| (sources.binary_search(&j).expect("source present"), w))
                    .collect()
            })
            .collect();
        (SparseRows::new(rows), sources)
    }
}

impl GraphEncoder {
    pub fn new(config: GraphEncoderConfig, r: &mut impl Rng) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 || config.output_dim == 0 {
            return Err(Error::Parameter("graph encoder dimensions must be positive".into()));
        }
        let w1 = uniform(r, config.input_dim, config.hidden_dim, (config.input_dim as f64).powf(-0.5));
        let w2 = uniform(r, config.hidden_dim, config.output_dim, (config.hidden_dim as f64).powf(-0.5));
        Ok(Self { config, w1, w2 })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GraphVars {
        GraphVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            slope: self.config.negative_slope,
        }
    }

    /// Node embeddings for every node.
    pub fn forward(&self, features: &Matrix, adjacency: &NormalizedAdjacency) -> Result<Matrix> {
        let all: Vec<NodeId> = (0..adjacency.len()).collect();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = vars.forward_nodes(&mut tape, features, adjacency, &all)?;
        Ok(tape.value(z).clone())
    }
}

/// Full-graph GCN forward from an edge list.
pub fn gcn_forward(
    encoder: &GraphEncoder,
    features: &Matrix,
    edges: &[(NodeId, NodeId)],
) -> Result<Matrix> {
    let adj = NormalizedAdjacency::from_edges(features.rows(), edges)?;
    encoder.forward(features, &adj)
}

impl Parameters for GraphEncoder {
    fn named_params(&self) -> Vec<(String, &Matrix)> {
        vec![("graph.w1".into(), &self.w1), ("graph.w2".into(), &self.w2)]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.w2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub w1: Var,
    pub w2: Var,
    slope: f64,
}

impl GraphVars {
    pub fn params(&self) -> [Var; 2] {
        [self.w1, self.w2]
    }

    /// Embeddings of `targets` only, touching just their two-hop neighbourhood.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        features: &Matrix,
        adjacency: &NormalizedAdjacency,
        targets: &[NodeId],
    ) -> Result<Var> {
        if features.rows() != adjacency.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                adjacency.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= adjacency.len()) {
            return Err(Error::Lookup(format!("unknown node {bad}")));
        }
        let (outer, hop1) = adjacency.restrict(targets);
        let (inner, hop2) = adjacency.restrict(&hop1);
        let x = tape.constant(features.select_rows(&hop2));
        let xw = tape.matmul(x, self.w1);
        let h = tape.sparse(xw, Arc::new(inner));
        let h = tape.leaky_relu(h, self.slope);
        let hw = tape.matmul(h, self.w2);
        let z = tape.sparse(hw, Arc::new(outer));
        Ok(tape.leaky_relu(z, self.slope))
    }
}
