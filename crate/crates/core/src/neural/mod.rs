//! Policy network: attribute embedders, attention over attributes and
//! entities, convolution over the tile crop, hidden MLP, hard-attention
//! argument selection and a value head, all with hand-written gradients.

mod checkpoint;
mod params;
mod policy;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use params::{ConvOffsets, EmbedSlot, Layout, NetSpec, PolicyParams, PopOffsets, SharedOffsets, TensorInfo};
pub use policy::{
    bundle_from_choices, permute_agents, select_arguments, ForwardTrace, GradSink, Gradients, LossSeed, Pick, Policy,
    Selection, MOVE_CHOICES, STYLE_CHOICES,
};
pub use tensor::{scaled_dot_attention, softmax, PooledAttention, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("invalid observation: {0}")]
    Observation(String),
    #[error("unknown population {0}")]
    UnknownPopulation(usize),
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}
