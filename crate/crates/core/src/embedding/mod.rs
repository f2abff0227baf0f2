//! Contrastive MLP encoder: architecture, losses, training, and embedding.

pub mod loss;
pub mod mlp;
pub mod train;

pub use loss::{ce_loss, combined_loss, simclr_loss, supcon_loss, ContrastiveKind, Reduction};
pub use mlp::{Architecture, ForwardOutput, MlpEncoder};
pub use train::{embed_dataset, train, write_log, ContrastiveConfig, EpochLog};
