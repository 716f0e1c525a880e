//! Reverse-mode differentiable tensor graph and the layer set used by the enhancer.
//!
//! A [`Graph`] records every operation of one forward pass; node creation
//! order is a topological order, so [`Graph::backward`] is a single reverse
//! sweep. Parameters live outside the graph in a [`ParamSet`] and are bound
//! into it as leaves.

mod adam;
mod fastexp;
mod gradcheck;
mod graph;
mod layers;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{
    grad_check, grad_check_limited, grad_check_with, relative_error, GradCheckReport,
};
pub use graph::{attention_weights, Gradients, Graph, Tensor, Var};
pub use layers::{
    bgru, gru_cell, gru_sequence, multi_head_attention, positional_encoding, transformer_layer,
    AttentionParams, GruParams, TransformerParams,
};
pub use params::{Init, Param, ParamSet, ParamSpec};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("model dimension {d} not divisible by {heads} heads")]
    HeadsMismatch { d: usize, heads: usize },
    #[error("positional encoding needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("silent reference signal")]
    SilentReference,
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NnError {
    NnError::Shape {
        op,
        detail: detail.into(),
    }
}
