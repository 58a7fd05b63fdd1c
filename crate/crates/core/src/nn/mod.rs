//! Dense networks, optimizer, quasi-random sampling and checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod mlp;
pub mod scaler;
pub mod sobol;
mod sobol_table;

pub use adamw::{clip_grad_norm, AdamW, AdamWConfig};
pub use checkpoint::{Container, NetCheckpoint};
pub use mlp::{Activation, Mlp, MlpArch, MlpCache};
pub use scaler::Scaler;
pub use sobol::{sobol_sample, Sobol};
