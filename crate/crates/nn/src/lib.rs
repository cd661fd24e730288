//! A small deterministic neural-network toolkit: rank-2 `f64` tensors,
//! tape-based reverse-mode differentiation, dense/normalization/attention
//! layers, Adam, finite-difference gradient checking and binary checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use attention::{multihead_self_attention, MultiHeadAttention, TransformerBlock};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{Activation, BatchNorm, Embedding, LayerNorm, Linear, Mlp};
pub use optim::Adam;
pub use params::{xavier_uniform, Grads, ParamId, ParamStore};
pub use tape::{softmax_rows, BatchStats, NodeGrads, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
