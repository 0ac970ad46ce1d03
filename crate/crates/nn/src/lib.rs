//! Dense neural primitives for the streaming extraction models.
//!
//! Everything here works on row-major [`Tensor2`] matrices of `f64`. The
//! forward kernels in [`ops`] are written so that every output row is
//! computed by the same sequence of floating point operations no matter how
//! many rows are processed together. Incremental (cached) and full-sequence
//! evaluation therefore agree bit for bit, which the streaming tests rely on.
//!
//! Training goes through [`Graph`], a small reverse-mode tape over the same
//! kernels, and [`finite_difference_grad`] provides the independent oracle.

pub mod checkpoint;
pub mod error;
pub mod grad;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use error::{NnError, Result};
pub use grad::{finite_difference_grad, grad, max_relative_error, relative_error};
pub use graph::{cross_entropy_value, mse_value, Graph, NodeId};
pub use ops::{
    attention_forward, attention_weights, causal_conv1d, gelu, layer_norm, linear, sinusoidal_position,
    attention_with_keys, multi_head_attention, transformer_block_forward, transformer_block_forward_cached, add_positions, AttentionMask, BlockParams, ConvState,
};
pub use params::{ParamInit, ParamSet, INIT_SCALE};
pub use tensor::Tensor2;
