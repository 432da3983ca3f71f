//! Graph-grounded contrastive pre-training of paired text and graph encoders,
//! with discrete, continuous and node-conditioned prompts for low-resource
//! text classification.

pub mod autograd;
pub mod conditional;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod prompting;
pub mod rng;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
pub use tensor::Matrix;
