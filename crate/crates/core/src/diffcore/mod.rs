//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`] then walks the
//! tape in reverse from a scalar root. Learnable arrays live in a [`ParamStore`] and enter a
//! graph as leaves through [`Graph::param`]; after a sweep their gradients are added back into
//! the store with [`Graph::accumulate_param_grads`].

mod array;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use graph::{bce, sigmoid, Graph, NodeId, OpKind, PROB_CLAMP};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: every position of slice {slice} is masked")]
    FullyMasked { op: &'static str, slice: usize },
    #[error("backward: root must hold a single value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("optimizer: {0}")]
    Hyper(String),
    #[error("parameter {0} already registered")]
    DuplicateParam(String),
}
