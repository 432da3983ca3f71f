//! Uniform access to the trainable matrices of a model component.

use std::hash::Hasher;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A component with a fixed, ordered list of named parameter matrices.
///
/// `named_params` and `params_mut` must list the same matrices in the same
/// order; checkpointing and the optimisers rely on it.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Matrix)>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_params().iter().map(|(_, m)| m.shape()).collect()
    }

    /// Hash of every parameter bit pattern, for freeze checks.
    fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        for (name, m) in self.named_params() {
            h.write(name.as_bytes());
            h.write_usize(m.rows());
            h.write_usize(m.cols());
            for v in m.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Overwrites parameters from `(name, matrix)` pairs; every name must be
    /// present with the expected shape.
    fn load_named(&mut self, mut source: impl FnMut(&str) -> Option<Matrix>) -> Result<()> {
        let names: Vec<(String, (usize, usize))> = self
            .named_params()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let m = source(name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if m.shape() != *shape {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    shape
                )));
            }
            loaded.push(m);
        }
        for (dst, src) in self.params_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(())
    }
}
