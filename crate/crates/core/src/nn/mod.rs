//! Dense network substrate: feed-forward nets with a recorded tape for
//! reverse-mode gradients, sinusoidal features, AdamW and checkpoints.

mod adamw;
mod checkpoint;
mod embed;
mod mlp;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{param_hash, Checkpoint, CheckpointKind, CHECKPOINT_VERSION};
pub use embed::{sinusoidal_embed, sinusoidal_embed_into};
pub use mlp::{GradTape, Grads, Mlp, OutputSquash};
