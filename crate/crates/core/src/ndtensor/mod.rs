//! Minimal dense-tensor reverse-mode automatic differentiation, with the
//! operations needed by set encoders, losses, and neural critics, plus Adam
//! and gradient clipping.

pub mod adam;
pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use array::{broadcast_shape, Mask, NdArray};
pub use checkpoint::{hex_digest, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::grad_check;
pub use graph::{Graph, TensorId};
