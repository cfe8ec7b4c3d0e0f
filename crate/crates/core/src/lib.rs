//! Self-supervised node embeddings by bootstrapping a graph encoder against
//! a slowly moving copy of itself.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, LabeledDataset, PropagationKind, PropagationMatrix, Splits};
pub use matrix::{DenseMatrix, SparseMatrix};
pub use rng::RngState;
