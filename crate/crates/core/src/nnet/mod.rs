//! Small trainable networks: dense layers, a reverse-mode tape, time
//! embeddings and an adaptive-moment optimizer.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, ModelMeta, TrainingMeta};
pub use mlp::{time_embedding, Activation, InputBlock, Mlp, NetworkSpec, OutputHead, TapedNet};
pub use tape::{Grads, Tape, Var};
