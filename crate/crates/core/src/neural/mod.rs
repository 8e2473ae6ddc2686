//! Tape-based autodiff and the two depth networks.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod nets;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::NetworkConfig;
pub use graph::{Gradients, Graph, Var};
pub use nets::{forward_dispnet, forward_masknet, predict_fused_masks, DispNet, InverseDepthMap, MaskNet};
pub use params::{LayerKind, LayerSpec, ParamStore};
pub use tensor::Tensor;
pub use augment::Augmentation;
pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use loss::{bce_mask_loss, multiscale_l1_loss};
pub use train::{DispStage, LossRecord, MaskDataset, MaskStage, TrainOptions, TrainingExample};
