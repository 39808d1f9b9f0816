//! Layer functions, their composition into a network with per-layer taps,
//! training, and checkpoints.

mod checkpoint;
pub mod layer;
mod network;
mod ortho;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layer::{BnMode, Layer, LayerSpec};
pub use network::{argmax_rows, ActivationTrace, Delta, Network};
pub use ortho::{
    clip_spectral_norm, orthogonality_defect, orthogonality_step, singular_values, spectral_norm,
};
pub use train::{measure_delta, train, EpochLog, Regularizer, TrainConfig, TrainLog};
